"""Command-line interface.

Every subcommand accepts the global ``--config`` (JSON), ``--seed`` and
``--threads`` flags.  The config file may hold ``geometry``, ``phantom``,
``pipeline``, ``denoiser`` and ``corpus`` sections; command-line options
override it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger("ctfield")

DEFAULT_GEOMETRY = {"n_views": 20, "sod_mm": 1000.0, "sdd_mm": 1500.0, "det_rows": 64, "det_cols": 64,
                    "pixel_pitch_mm": 3.0, "volume_extent_mm": 64.0}
DEFAULT_PHANTOM = {"preset": "structured", "dims": 64, "voxel_mm": 2.0}


def _set_threads(n: int) -> None:
    # Must run before numpy/torch spin up their pools.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    import torch
    torch.set_num_threads(n)


def _load_config(path: Optional[str]) -> tuple[dict, Optional[str]]:
    if not path:
        return {}, None
    text = Path(path).read_text()
    return json.loads(text), text


def _geometry(cfg: dict, args, n_views: Optional[int] = None):
    from .geometry import ScanGeometry
    g = {**DEFAULT_GEOMETRY, **cfg.get("geometry", {})}
    if n_views is not None:
        g.pop("angles_deg", None)
        g["n_views"] = n_views
    if getattr(args, "angles", None):
        g.pop("n_views", None)
        g["angles_deg"] = sorted(args.angles)
    return ScanGeometry.from_dict(g)


def _phantom(cfg: dict, args):
    from .phantom import PRESETS, make_phantom
    p = {**DEFAULT_PHANTOM, **cfg.get("phantom", {})}
    for key in ("preset", "dims", "voxel_mm"):
        v = getattr(args, key, None)
        if v is not None:
            p[key] = v
    return make_phantom(PRESETS[p["preset"]](), p["dims"], p["voxel_mm"])


def _train_config(cfg: dict, args):
    from .field import TrainConfig
    t = TrainConfig.from_dict(cfg.get("pipeline", {}).get("train", {}))
    t = replace(t, rng_seed=args.seed)
    if getattr(args, "steps", None):
        t = replace(t, steps_per_outer_iter=args.steps)
    return t


def _write_json(path: Optional[str], obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# -- commands ------------------------------------------------------------------

def cmd_phantom(args, cfg):
    from .io import write_volume
    vol = _phantom(cfg, args)
    write_volume(args.out, vol)
    log.info("wrote %s dims=%s voxel=%s", args.out, vol.dims, vol.voxel_mm)


def cmd_project(args, cfg):
    from .io import read_volume, write_projection_set
    from .projector import forward_project
    vol = read_volume(args.volume)
    geom = _geometry(cfg, args, args.views)
    write_projection_set(args.out, forward_project(vol, geom, n_samples=args.samples))


def _recon_grid(cfg, args):
    p = {**DEFAULT_PHANTOM, **cfg.get("phantom", {})}
    return args.dims or p["dims"], args.voxel_mm or p["voxel_mm"]


def cmd_recon_fdk(args, cfg):
    from .io import read_projection_set, write_volume
    from .projector import fdk_reconstruct
    dims, voxel = _recon_grid(cfg, args)
    write_volume(args.out, fdk_reconstruct(read_projection_set(args.projections), dims, voxel))


def cmd_recon_sart(args, cfg):
    from .io import read_projection_set, write_volume
    from .projector import sart_reconstruct
    dims, voxel = _recon_grid(cfg, args)
    vol = sart_reconstruct(read_projection_set(args.projections), dims, voxel, args.iters, args.relaxation)
    write_volume(args.out, vol)


def cmd_train_naf(args, cfg):
    from .field import render_volume, train_field
    from .io import read_projection_set, write_checkpoint, write_volume
    projs = read_projection_set(args.projections)
    train = _train_config(cfg, args)
    params = train_field(projs, train)
    write_checkpoint(args.out, params, train.field)
    if args.volume_out:
        dims, voxel = _recon_grid(cfg, args)
        write_volume(args.volume_out, render_volume(params, train.field, dims, voxel,
                                                    projs.geometry.volume_extent_mm))


def cmd_select_views(args, cfg):
    from .io import read_checkpoint, read_projection_set, write_projection_set
    from .projector import ProjectionSet
    from .synthesis import n_new_for_ratio, select_views_apgps, synthesize_projection
    params, fcfg = read_checkpoint(args.checkpoint)
    projs = read_projection_set(args.projections)
    n_real = sum(1 for im in projs.images if im.provenance == "real")
    report: list = []
    angles = select_views_apgps(params, fcfg, projs.geometry, projs.angles, args.candidates,
                                n_new_for_ratio(args.ratio, n_real), args.a,
                                reference={im.angle_deg: im.pixels for im in projs.images}, report=report)
    if args.out:
        imgs = [synthesize_projection(params, fcfg, projs.geometry, a) for a in angles]
        write_projection_set(args.out, ProjectionSet(projs.geometry, imgs))
    _write_json(args.report, report[0].to_dict())


def cmd_synthesize(args, cfg):
    from .io import read_checkpoint, read_projection_set, write_projection_set
    from .projector import ProjectionSet
    from .synthesis import synthesize_projection
    params, fcfg = read_checkpoint(args.checkpoint)
    geom = read_projection_set(args.projections).geometry if args.projections else _geometry(cfg, args)
    imgs = [synthesize_projection(params, fcfg, geom, a % 360.0) for a in args.at]
    write_projection_set(args.out, ProjectionSet(geom, imgs))


def _denoiser_setup(cfg, args):
    from .refiner import CorpusConfig, DenoiserConfig, DenoiserTrainConfig
    d = dict(cfg.get("denoiser", {}))
    train = DenoiserTrainConfig.from_dict(d) if d else DenoiserTrainConfig()
    train = replace(train, seed=args.seed)
    if getattr(args, "steps", None):
        train = replace(train, steps=args.steps)
    c = dict(cfg.get("corpus", {}))
    if "subsets" in c:
        c["subsets"] = tuple(tuple(s) for s in c["subsets"])
    for k in ("blur_sigma_px", "noise_fraction"):
        if k in c:
            c[k] = tuple(c[k])
    corpus = replace(CorpusConfig(**c), seed=args.seed)
    return train, corpus


def cmd_train_drpr(args, cfg):
    from .io import read_volume, write_denoiser
    from .refiner import build_corpus, make_schedule, normalize_pairs, train_denoiser
    vol = read_volume(args.volume) if args.volume else _phantom(cfg, args)
    train, corpus = _denoiser_setup(cfg, args)
    geom = _geometry(cfg, args)
    net = replace(train.network, image_shape=(geom.det_rows, geom.det_cols))
    train = replace(train, network=net)
    pairs = normalize_pairs(build_corpus(vol, geom, corpus, _train_config(cfg, args)))
    params = train_denoiser(pairs, make_schedule(net.T), train)
    write_denoiser(args.out, params)


def cmd_refine(args, cfg):
    from .io import read_denoiser, read_projection_set, write_projection_set
    from .projector import ProjectionSet
    from .refiner import Denoiser, make_schedule, refine_images
    den = Denoiser(read_denoiser(args.denoiser))
    projs = read_projection_set(args.projections)
    seeds = [args.seed * 100003 + i for i in range(len(projs))]
    out = refine_images(projs.images, den, make_schedule(den.params.config.T), seeds, args.strategy)
    write_projection_set(args.out, ProjectionSet(projs.geometry, out))


def _pipeline_config(cfg, args):
    from .pipeline import PipelineConfig
    pc = PipelineConfig.from_dict(cfg.get("pipeline", {}))
    pc = replace(pc, seed=args.seed)
    for key in ("K", "projection_ratio", "reuse_strategy"):
        v = getattr(args, key, None)
        if v is not None:
            pc = replace(pc, **{key: v})
    if getattr(args, "oracle", False):
        pc = replace(pc, oracle_refiner=True)
    return pc


def _inputs(cfg, args):
    from .io import read_projection_set, read_volume
    from .projector import forward_project
    gt = read_volume(args.volume) if args.volume else (_phantom(cfg, args) if not args.projections else None)
    if args.projections:
        projs = read_projection_set(args.projections)
    else:
        projs = forward_project(gt, _geometry(cfg, args))
    return gt, projs


def cmd_run(args, cfg, config_text):
    from .io import read_denoiser, write_checkpoint, write_manifest, write_projection_set, write_volume
    from .metrics import evaluate
    from .pipeline import run_diffnaf
    from .refiner import Denoiser
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pc = _pipeline_config(cfg, args)
    gt, projs = _inputs(cfg, args)
    den = Denoiser(read_denoiser(args.denoiser)) if args.denoiser else None
    artifacts = {}

    def snapshot(k, params, ps, report):
        ck, pp = out / f"field_k{k}.ctnf", out / f"projections_k{k}.ctps"
        write_checkpoint(ck, params, pc.train.field)
        write_projection_set(pp, ps)
        artifacts[f"field_k{k}"] = ck.name
        artifacts[f"projections_k{k}"] = pp.name

    p = {**DEFAULT_PHANTOM, **cfg.get("phantom", {})}
    _, vol, reports = run_diffnaf(gt, projs, pc, den, p["dims"], p["voxel_mm"], on_iteration=snapshot)
    write_volume(out / "reconstruction.ctv", vol)
    artifacts["reconstruction"] = "reconstruction.ctv"
    manifest = {
        "format": "ctfield-run-manifest", "version": 1, "command": "run", "seed": args.seed,
        "threads": args.threads, "config_text": config_text,
        "config": {"pipeline": pc.to_dict(), "geometry": projs.geometry.to_dict()},
        "iterations": [r.to_dict() for r in reports],
        "metrics": evaluate(vol, gt).to_dict() if gt is not None else None,
        "artifacts": artifacts,
    }
    write_manifest(out / "manifest.json", manifest)
    log.info("wrote %s", out / "manifest.json")


def cmd_ablate(args, cfg):
    from .io import read_denoiser
    from .pipeline import ablation_matrix
    from .refiner import Denoiser
    pc = _pipeline_config(cfg, args)
    gt, projs = _inputs(cfg, args)
    if gt is None:
        raise SystemExit("ablate needs a ground-truth volume")
    den = Denoiser(read_denoiser(args.denoiser)) if args.denoiser else None
    rows = ablation_matrix(gt, projs, pc, args.strategies, args.ratios, args.ks or [None], den)
    data = [r.to_dict() for r in rows]
    if args.out and args.out.endswith(".csv"):
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(data[0]))
            w.writeheader()
            w.writerows(data)
    else:
        _write_json(args.out, data)


def cmd_evaluate(args, cfg):
    from .io import read_volume
    from .metrics import evaluate
    rep = evaluate(read_volume(args.recon), read_volume(args.truth), args.data_range)
    print(rep.record())
    if args.json:
        _write_json(args.json, rep.to_dict())


def cmd_export_plots(args, cfg):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .io import read_manifest
    its = read_manifest(args.manifest)["iterations"]
    prefix = Path(args.out_prefix)
    rows = [{"k": it["k"], "n_views": it["n_views"], "psnr_db": it["psnr_db"], "ssim": it["ssim"],
             "wall_clock_s": it["wall_clock_s"]} for it in its]
    with open(f"{prefix}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    fig, ax = plt.subplots(1, 2, figsize=(8, 3))
    ks = [r["k"] for r in rows]
    ax[0].plot(ks, [r["psnr_db"] for r in rows], "o-")
    ax[0].set_xlabel("outer iteration k")
    ax[0].set_ylabel("PSNR (dB)")
    ax[1].plot(ks, [r["ssim"] for r in rows], "o-")
    ax[1].set_xlabel("outer iteration k")
    ax[1].set_ylabel("SSIM")
    fig.tight_layout()
    fig.savefig(f"{prefix}.svg", format="svg")
    plt.close(fig)


# -- parser ----------------------------------------------------------------------

def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctfield", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    def grid(sp):
        sp.add_argument("--dims", type=int)
        sp.add_argument("--voxel-mm", dest="voxel_mm", type=float)

    s = add("phantom", "voxelize a preset phantom")
    s.add_argument("--preset", choices=["sphere", "two-sphere", "structured"])
    grid(s)
    s.add_argument("--out", required=True)

    s = add("project", "forward-project a volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--views", type=int)
    s.add_argument("--angles", type=_floats)
    s.add_argument("--samples", type=int)
    s.add_argument("--out", required=True)

    s = add("recon-fdk", "FDK reconstruction")
    s.add_argument("--projections", required=True)
    grid(s)
    s.add_argument("--out", required=True)

    s = add("recon-sart", "SART reconstruction")
    s.add_argument("--projections", required=True)
    grid(s)
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--relaxation", type=float, default=0.5)
    s.add_argument("--out", required=True)

    s = add("train-naf", "fit the attenuation field")
    s.add_argument("--projections", required=True)
    s.add_argument("--steps", type=int)
    grid(s)
    s.add_argument("--out", required=True)
    s.add_argument("--volume-out")

    s = add("select-views", "choose new angles by gradient dissimilarity")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--projections", required=True)
    s.add_argument("--ratio", type=float, default=1.0)
    s.add_argument("--candidates", type=int, default=5)
    s.add_argument("--a", type=float, default=4.0)
    s.add_argument("--out", help="projection set of the synthesized selections")
    s.add_argument("--report", help="selection report JSON (stdout if absent)")

    s = add("synthesize", "render projections from a field checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--projections", help="take the geometry from this set")
    s.add_argument("--angles", dest="at", type=_floats, required=True)
    s.add_argument("--out", required=True)

    s = add("train-drpr", "train the refinement denoiser")
    s.add_argument("--volume")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)

    s = add("refine", "refine projections with a trained denoiser")
    s.add_argument("--denoiser", required=True)
    s.add_argument("--projections", required=True)
    s.add_argument("--strategy", default="drat", choices=["none", "minmax-roundtrip", "drat"])
    s.add_argument("--out", required=True)

    for name, help_ in (("run", "full iterative pipeline"), ("ablate", "ablation table")):
        s = add(name, help_)
        s.add_argument("--volume")
        s.add_argument("--projections")
        s.add_argument("--denoiser")
        s.add_argument("--K", type=int)
        s.add_argument("--ratio", dest="projection_ratio", type=float)
        s.add_argument("--strategy", dest="reuse_strategy", choices=["none", "minmax-roundtrip", "drat"])
        s.add_argument("--oracle", action="store_true", help="refine with ground-truth projections")
        if name == "run":
            s.add_argument("--out-dir", required=True)
        else:
            s.add_argument("--strategies", type=lambda x: x.split(","), default=["none", "minmax-roundtrip", "drat"])
            s.add_argument("--ratios", type=_floats, default=[1.0])
            s.add_argument("--ks", type=lambda x: [int(v) for v in x.split(",")])
            s.add_argument("--out")

    s = add("evaluate", "PSNR/SSIM of a reconstruction")
    s.add_argument("--recon", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--data-range", type=float)
    s.add_argument("--json")

    s = add("export-plots", "per-iteration metric curves as CSV and SVG")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-prefix", required=True)
    return p


COMMANDS = {
    "phantom": cmd_phantom, "project": cmd_project, "recon-fdk": cmd_recon_fdk, "recon-sart": cmd_recon_sart,
    "train-naf": cmd_train_naf, "select-views": cmd_select_views, "synthesize": cmd_synthesize,
    "train-drpr": cmd_train_drpr, "refine": cmd_refine, "ablate": cmd_ablate, "evaluate": cmd_evaluate,
    "export-plots": cmd_export_plots,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0:
        raise SystemExit("--seed must be non-negative")
    if args.threads < 1:
        raise SystemExit("--threads must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    cfg, text = _load_config(args.config)
    if args.command == "run":
        cmd_run(args, cfg, text)
    else:
        COMMANDS[args.command](args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
