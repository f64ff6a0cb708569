"""Outer loop: fit field, pick views, synthesize, refine, merge pseudo-labels, refit."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .field import FieldParams, TrainConfig, render_volume, train_field
from .metrics import psnr, ssim
from .phantom import VolumeGrid
from .projector import PSEUDO, REAL, ProjectionImage, ProjectionSet, project_view
from .refiner import REUSE_STRATEGIES, DenoiserFn, make_schedule, refine_images
from .synthesis import n_new_for_ratio, select_views_apgps, synthesize_projection

log = logging.getLogger(__name__)

RATIOS = (0.25, 0.5, 1.0, 2.0)


class DuplicateAngleError(ValueError):
    """A pseudo-label angle is already present in the training set."""


@dataclass(frozen=True)
class PipelineConfig:
    K: int = 3
    projection_ratio: float = 1.0
    w1: float = 1.0
    w2: float = 0.5
    reuse_strategy: str = "drat"
    oracle_refiner: bool = False
    seed: int = 0
    n_candidates_per_gap: int = 5
    interval_a: float = 4.0
    diffusion_steps: int = 50
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if not any(math.isclose(self.projection_ratio, r) for r in RATIOS):
            raise ValueError(f"projection_ratio must be one of {RATIOS}, got {self.projection_ratio}")
        if self.reuse_strategy not in REUSE_STRATEGIES:
            raise ValueError(f"reuse_strategy must be one of {REUSE_STRATEGIES}")
        if not (self.w1 > 0 and self.w2 > 0):
            raise ValueError("w1 and w2 must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        train = TrainConfig.from_dict(d.pop("train")) if "train" in d else TrainConfig()
        return cls(train=train, **d)


@dataclass
class IterationReport:
    k: int
    added_angles: list[float]
    n_views: int
    refinement_deltas: list[float] = field(default_factory=list)
    synthetic_rmse: list[float] = field(default_factory=list)
    refined_rmse: list[float] = field(default_factory=list)
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["psnr_db"] is not None and math.isinf(d["psnr_db"]):
            d["psnr_db"] = None
        return d


def merge_pseudo_labels(current: ProjectionSet, refined: Sequence[ProjectionImage],
                        w1: float = 1.0, w2: float = 0.5) -> ProjectionSet:
    """Union of ``current`` and ``refined``; real images weigh ``w1``, pseudo ``w2``.

    Pixel arrays of existing images are reused, not copied or modified.
    """
    have = set(current.angles)
    new_angles = [im.angle_deg for im in refined]
    if len(set(new_angles)) != len(new_angles):
        raise DuplicateAngleError("refined images repeat an angle")
    clash = have.intersection(new_angles)
    if clash:
        raise DuplicateAngleError(f"angles already in the training set: {sorted(clash)}")
    images = []
    for im in list(current.images) + list(refined):
        w = w1 if im.provenance == REAL else w2
        if w == im.weight:
            images.append(im)
        else:
            images.append(ProjectionImage(im.angle_deg, im.pixels, im.provenance, w))
    return ProjectionSet(current.geometry, images)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)))


def _evaluate(params: FieldParams, config: PipelineConfig, gt: Optional[VolumeGrid], extent: float,
              report: IterationReport) -> Optional[VolumeGrid]:
    if gt is None:
        return None
    vol = render_volume(params, config.train.field, gt.dims, gt.voxel_mm, extent)
    report.psnr_db = psnr(vol, gt)
    report.ssim = ssim(vol, gt)
    return vol


def run_diffnaf(ground_truth: Optional[VolumeGrid], initial_projs: ProjectionSet, config: PipelineConfig,
                denoiser: Optional[DenoiserFn] = None, render_dims=None, render_voxel_mm: Optional[float] = None,
                on_iteration: Optional[Callable[[int, FieldParams, ProjectionSet, IterationReport], None]] = None):
    """Run the iterative reconstruction.

    Iteration 0 fits the field to the real projections with weight 1 and the
    training seed ``config.seed``.  Each later iteration selects
    ``round(ratio * n_real)`` new angles against the current training set,
    synthesizes and refines them, merges them as pseudo-labels and continues
    training from the previous parameters with a seed derived from
    ``(config.seed, k)``.  In oracle mode the refined images are ground-truth
    projections at the selected angles.

    Returns ``(params, volume, reports)``; ``volume`` is rendered on the
    ground-truth grid, or on ``render_dims``/``render_voxel_mm`` without one.
    """
    if len(initial_projs) == 0:
        raise ValueError("need at least one initial projection")
    if any(im.provenance != REAL for im in initial_projs.images):
        raise ValueError("initial projections must all be real")
    if config.oracle_refiner and ground_truth is None:
        raise ValueError("oracle refiner needs the ground-truth volume")
    if (config.K > 0 and not config.oracle_refiner and config.reuse_strategy != "none"
            and denoiser is None):
        raise ValueError(f"reuse strategy {config.reuse_strategy!r} needs a denoiser")
    geom = initial_projs.geometry
    extent = geom.volume_extent_mm
    schedule = make_schedule(config.diffusion_steps)
    n_real = len(initial_projs)
    n_samples = config.train.samples_per_ray

    t_start = time.perf_counter()
    projs = ProjectionSet(geom, [im if im.weight == 1.0 else ProjectionImage(im.angle_deg, im.pixels, REAL, 1.0)
                                 for im in initial_projs.images])
    params = train_field(projs, replace(config.train, rng_seed=config.seed))
    reports = [IterationReport(0, [], len(projs))]
    _evaluate(params, config, ground_truth, extent, reports[0])
    reports[0].wall_clock_s = time.perf_counter() - t_start
    log.info("k=0 views=%d psnr=%s", len(projs), reports[0].psnr_db)
    if on_iteration:
        on_iteration(0, params, projs, reports[0])

    for k in range(1, config.K + 1):
        t_start = time.perf_counter()
        n_new = n_new_for_ratio(config.projection_ratio, n_real)
        reference = {im.angle_deg: im.pixels for im in projs.images}
        angles = select_views_apgps(params, config.train.field, geom, projs.angles,
                                    config.n_candidates_per_gap, n_new, config.interval_a,
                                    n_samples, reference=reference)
        synthetic = [synthesize_projection(params, config.train.field, geom, a, n_samples, config.w2)
                     for a in angles]
        seeds = [_derived_seed(config.seed, k, i) for i in range(len(synthetic))]
        if config.oracle_refiner:
            refined = [ProjectionImage(a, project_view(ground_truth, geom, a), PSEUDO, config.w2) for a in angles]
        else:
            refined = refine_images(synthetic, denoiser, schedule, seeds, config.reuse_strategy, config.w2)
        report = IterationReport(k, list(angles), 0)
        report.refinement_deltas = [_rmse(r.pixels, s.pixels) for r, s in zip(refined, synthetic)]
        if ground_truth is not None:
            truth = [project_view(ground_truth, geom, a) for a in angles]
            report.synthetic_rmse = [_rmse(s.pixels, t) for s, t in zip(synthetic, truth)]
            report.refined_rmse = [_rmse(r.pixels, t) for r, t in zip(refined, truth)]
        projs = merge_pseudo_labels(projs, refined, config.w1, config.w2)
        report.n_views = len(projs)
        train_k = replace(config.train, rng_seed=_derived_seed(config.seed, k))
        params = train_field(projs, train_k, init=params)
        _evaluate(params, config, ground_truth, extent, report)
        report.wall_clock_s = time.perf_counter() - t_start
        reports.append(report)
        log.info("k=%d views=%d psnr=%s", k, len(projs), report.psnr_db)
        if on_iteration:
            on_iteration(k, params, projs, report)

    if ground_truth is not None:
        dims, voxel = ground_truth.dims, ground_truth.voxel_mm
    else:
        if render_dims is None or render_voxel_mm is None:
            raise ValueError("render_dims and render_voxel_mm are required without ground truth")
        dims, voxel = render_dims, render_voxel_mm
    volume = render_volume(params, config.train.field, dims, voxel, extent)
    return params, volume, reports


@dataclass
class AblationRow:
    reuse_strategy: str
    projection_ratio: float
    K: int
    psnr_db: Optional[float]
    ssim: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def ablation_matrix(ground_truth: VolumeGrid, initial_projs: ProjectionSet, base: PipelineConfig,
                    strategies: Sequence[str] = ("drat",), ratios: Sequence[float] = (1.0,),
                    Ks: Sequence[int] = (None,), denoiser: Optional[DenoiserFn] = None) -> list[AblationRow]:
    """PSNR/SSIM per (strategy, ratio, K) cell with shared seeds.

    Runs share every seed, so the first ``K`` iterations of a longer run are
    identical to a run with that ``K``; one run per (strategy, ratio) at the
    largest requested ``K`` therefore covers the whole K sweep.  ``None`` in
    ``Ks`` stands for ``base.K``.
    """
    ks = sorted({base.K if k is None else int(k) for k in Ks})
    rows = []
    for strat in strategies:
        for r in ratios:
            cfg = replace(base, reuse_strategy=strat, projection_ratio=float(r), K=max(ks))
            _, _, reports = run_diffnaf(ground_truth, initial_projs, cfg, denoiser)
            for k in ks:
                rep = reports[k]
                rows.append(AblationRow(strat, float(r), k, rep.psnr_db, rep.ssim))
    return rows
