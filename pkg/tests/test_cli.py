from __future__ import annotations

import json

import pytest
from helpers import SMALL_FIELD

from ctfield.cli import main
from ctfield.io import read_manifest, read_projection_set, read_volume


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {
        "geometry": {"n_views": 6, "det_rows": 16, "det_cols": 16, "pixel_pitch_mm": 12.0,
                     "volume_extent_mm": 64.0},
        "phantom": {"preset": "structured", "dims": 16, "voxel_mm": 8.0},
        "pipeline": {"K": 1, "n_candidates_per_gap": 2,
                     "train": {"steps_per_outer_iter": 10, "rays_per_batch": 32, "samples_per_ray": 8,
                               "field": SMALL_FIELD.to_dict()}},
        "denoiser": {"steps": 3, "batch_size": 2, "crop": 16,
                     "network": {"base_channels": 4, "time_dim": 8, "T": 5}},
        "corpus": {"n_clean_angles": 4, "subsets": [[4, 10.0]], "field_steps": 3, "n_parametric": 2,
                   "samples_per_ray": 8},
    }
    (d / "cfg.json").write_text(json.dumps(cfg))
    return d


def run(workdir, *args):
    assert main([*args, "--config", str(workdir / "cfg.json")]) == 0


def test_data_commands(workdir):
    w = workdir
    run(w, "phantom", "--out", str(w / "gt.ctv"))
    assert read_volume(w / "gt.ctv").dims == (16, 16, 16)
    run(w, "project", "--volume", str(w / "gt.ctv"), "--out", str(w / "p.ctps"))
    assert len(read_projection_set(w / "p.ctps")) == 6
    run(w, "recon-fdk", "--projections", str(w / "p.ctps"), "--out", str(w / "fdk.ctv"))
    run(w, "recon-sart", "--projections", str(w / "p.ctps"), "--iters", "2", "--out", str(w / "sart.ctv"))
    run(w, "evaluate", "--recon", str(w / "sart.ctv"), "--truth", str(w / "gt.ctv"), "--json",
        str(w / "m.json"))
    assert "ssim" in json.loads((w / "m.json").read_text())


def test_field_commands(workdir):
    w = workdir
    if not (w / "p.ctps").exists():
        test_data_commands(w)
    run(w, "train-naf", "--projections", str(w / "p.ctps"), "--out", str(w / "f.ctnf"),
        "--volume-out", str(w / "naf.ctv"))
    run(w, "select-views", "--checkpoint", str(w / "f.ctnf"), "--projections", str(w / "p.ctps"),
        "--ratio", "0.5", "--out", str(w / "sel.ctps"), "--report", str(w / "sel.json"))
    assert len(json.loads((w / "sel.json").read_text())["angles_deg"]) == 3
    run(w, "synthesize", "--checkpoint", str(w / "f.ctnf"), "--projections", str(w / "p.ctps"),
        "--angles", "5,95", "--out", str(w / "syn.ctps"))
    assert read_projection_set(w / "syn.ctps").angles == [5.0, 95.0]
    run(w, "train-drpr", "--out", str(w / "d.ctdn"))
    run(w, "refine", "--denoiser", str(w / "d.ctdn"), "--projections", str(w / "syn.ctps"),
        "--out", str(w / "ref.ctps"))
    assert len(read_projection_set(w / "ref.ctps")) == 2


def test_pipeline_commands(workdir):
    w = workdir
    out = w / "run"
    run(w, "run", "--oracle", "--out-dir", str(out))
    m = read_manifest(out / "manifest.json")
    assert [it["k"] for it in m["iterations"]] == [0, 1]
    assert json.loads(m["config_text"])["phantom"]["dims"] == 16
    assert (out / m["artifacts"]["reconstruction"]).exists()
    run(w, "export-plots", "--manifest", str(out / "manifest.json"), "--out-prefix", str(w / "curve"))
    assert (w / "curve.csv").read_text().startswith("k,")
    assert (w / "curve.svg").read_text().lstrip().startswith("<?xml")
    run(w, "ablate", "--strategies", "none", "--ks", "0,1", "--out", str(w / "abl.csv"))
    assert len((w / "abl.csv").read_text().strip().splitlines()) == 3


def test_bad_flags(workdir):
    with pytest.raises(SystemExit):
        main(["phantom", "--out", str(workdir / "x.ctv"), "--seed", "-1"])
    with pytest.raises(SystemExit):
        main(["nonsense"])
