"""Forward projection into DR projection sets, plus FDK and SART baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels
from .geometry import ScanGeometry, detector_offsets, entry_exit_many, view_frame, view_rays
from .phantom import VolumeGrid, _dims3

REAL = "real"
PSEUDO = "pseudo"


class GeometryMismatchError(ValueError):
    """Projections, volume grid and geometry disagree."""


@dataclass
class ProjectionImage:
    """One DR projection in the line-integral domain."""

    angle_deg: float
    pixels: np.ndarray
    provenance: str = REAL
    weight: float = 1.0

    def __post_init__(self):
        if self.provenance not in (REAL, PSEUDO):
            raise ValueError(f"provenance must be 'real' or 'pseudo', got {self.provenance!r}")
        if not self.weight > 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("projection pixels must be finite")


@dataclass
class ProjectionSet:
    geometry: ScanGeometry
    images: list[ProjectionImage] = field(default_factory=list)

    def __post_init__(self):
        self.images = sorted(self.images, key=lambda im: im.angle_deg)
        angles = [im.angle_deg for im in self.images]
        if len(set(angles)) != len(angles):
            raise ValueError("duplicate projection angles")
        shape = (self.geometry.det_rows, self.geometry.det_cols)
        for im in self.images:
            if im.pixels.shape != shape:
                raise GeometryMismatchError(
                    f"image at {im.angle_deg} deg has shape {im.pixels.shape}, detector is {shape}")

    @property
    def angles(self) -> list[float]:
        return [im.angle_deg for im in self.images]

    def __len__(self) -> int:
        return len(self.images)

    def stack(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images]) if self.images else np.zeros(
            (0, self.geometry.det_rows, self.geometry.det_cols), np.float32)

    def subset(self, keep: Callable[[ProjectionImage], bool]) -> "ProjectionSet":
        return ProjectionSet(self.geometry, [im for im in self.images if keep(im)])


def default_samples(volume_dims) -> int:
    """Samples per ray giving a step below one voxel on the longest chord."""
    return 2 * max(_dims3(volume_dims))


def _check_extent(geom: ScanGeometry, dims, voxel_mm: float) -> None:
    half = np.array(_dims3(dims), dtype=np.float64) * voxel_mm / 2.0
    if np.any(half > geom.volume_extent_mm * (1 + 1e-9)):
        raise GeometryMismatchError(
            f"volume half-extent {half.tolist()} mm exceeds geometry extent {geom.volume_extent_mm} mm")


def project_view(volume: VolumeGrid, geom: ScanGeometry, theta_deg: float,
                 n_samples: Optional[int] = None) -> np.ndarray:
    """Line integrals for every pixel of the view at ``theta_deg``; (rows, cols)."""
    n = n_samples or default_samples(volume.dims)
    src, dirs = view_rays(geom, theta_deg)
    d = np.ascontiguousarray(dirs.reshape(-1, 3))
    o = np.ascontiguousarray(np.broadcast_to(src, d.shape))
    t0, t1 = entry_exit_many(o, d, float(np.max(volume.half_extent_mm)))
    out = np.empty(d.shape[0])
    _kernels.march_forward(np.ascontiguousarray(volume.values, dtype=np.float32),
                           np.asarray(volume.origin_mm, dtype=np.float64), float(volume.voxel_mm),
                           o, d, t0, t1, int(n), out)
    return out.reshape(geom.det_rows, geom.det_cols)


def forward_project(volume: VolumeGrid, geom: ScanGeometry,
                    angles: Optional[Iterable[float]] = None,
                    n_samples: Optional[int] = None) -> ProjectionSet:
    """Project ``volume`` at ``angles`` (default: the geometry's own angles)."""
    _check_extent(geom, volume.dims, volume.voxel_mm)
    angles = list(geom.angles_deg if angles is None else angles)
    images = [ProjectionImage(float(a), project_view(volume, geom, a, n_samples)) for a in angles]
    return ProjectionSet(geom, images)


# -- SART -------------------------------------------------------------------

class _ViewOperator:
    """Matrix-free ray-driven projector/backprojector for one view."""

    def __init__(self, geom: ScanGeometry, theta_deg: float, grid: VolumeGrid, n_samples: int):
        src, dirs = view_rays(geom, theta_deg)
        self.d = np.ascontiguousarray(dirs.reshape(-1, 3))
        self.o = np.ascontiguousarray(np.broadcast_to(src, self.d.shape))
        self.t0, self.t1 = entry_exit_many(self.o, self.d, float(np.max(grid.half_extent_mm)))
        self.lo = np.asarray(grid.origin_mm, dtype=np.float64)
        self.voxel = float(grid.voxel_mm)
        self.shape = grid.values.shape
        self.n = n_samples

    def forward(self, vol: np.ndarray) -> np.ndarray:
        out = np.empty(self.d.shape[0])
        _kernels.march_forward(vol, self.lo, self.voxel, self.o, self.d, self.t0, self.t1, self.n, out)
        return out

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        vol = np.zeros(self.shape, dtype=np.float64)
        _kernels.march_adjoint(values, self.lo, self.voxel, self.o, self.d, self.t0, self.t1, self.n, vol)
        return vol


def sart_reconstruct(projs: ProjectionSet, dims, voxel_mm: float, n_iters: int,
                     relaxation: float, n_samples: Optional[int] = None,
                     callback: Optional[Callable[[int, VolumeGrid], None]] = None) -> VolumeGrid:
    """SART with per-view updates swept in angle order.

    Each view update is ``x += lam * A_v^T(r / A_v 1) / A_v^T 1`` with
    ``r = b_v - A_v x``; row sums (ray chord weights) and column sums are
    precomputed once.  The iterate is projected onto ``x >= 0`` after every
    view update, so each sweep's volume is already non-negative.
    ``callback(iteration, volume)`` is called after every full sweep.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if not 0 < relaxation <= 1:
        raise ValueError("relaxation must lie in (0, 1]")
    geom = projs.geometry
    _check_extent(geom, dims, voxel_mm)
    grid = VolumeGrid.zeros(dims, voxel_mm)
    n = n_samples or default_samples(grid.dims)
    ops = [_ViewOperator(geom, im.angle_deg, grid, n) for im in projs.images]
    ones = np.ones(grid.values.shape, dtype=np.float32)
    row_sums, col_sums = [], []
    for op in ops:
        rs = op.forward(ones)
        row_sums.append(rs)
        col_sums.append(op.adjoint(np.ones_like(rs)).astype(np.float32))
    x = np.zeros(grid.values.shape, dtype=np.float32)
    b = [im.pixels.reshape(-1).astype(np.float64) for im in projs.images]
    for it in range(n_iters):
        for op, bv, rs, cs in zip(ops, b, row_sums, col_sums):
            r = bv - op.forward(x)
            r = np.divide(r, rs, out=np.zeros_like(r), where=rs > 1e-12)
            upd = op.adjoint(r)
            x += (relaxation * np.divide(upd, cs, out=np.zeros_like(upd), where=cs > 1e-12)).astype(np.float32)
            np.maximum(x, 0.0, out=x)
        if callback is not None:
            callback(it + 1, VolumeGrid(x.copy(), grid.voxel_mm, grid.origin_mm))
    return VolumeGrid(x, grid.voxel_mm, grid.origin_mm)


# -- FDK --------------------------------------------------------------------

def ramp_kernel(n: int, spacing: float) -> np.ndarray:
    """Spatial Ram-Lak kernel h[k] for k = -(n-1)..(n-1)."""
    k = np.arange(-(n - 1), n)
    h = np.zeros(k.shape, dtype=np.float64)
    h[k == 0] = 1.0 / (4.0 * spacing ** 2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    return h


def ramp_filter_rows(p: np.ndarray, spacing: float) -> np.ndarray:
    """Row-wise ramp filtering via zero-padded FFT (linear, not circular, convolution)."""
    rows, cols = p.shape
    h = ramp_kernel(cols, spacing)
    size = 1 << int(math.ceil(math.log2(cols + h.size - 1)))
    H = np.fft.rfft(h, size)
    P = np.fft.rfft(p, size, axis=1)
    full = np.fft.irfft(P * H[None, :], size, axis=1)
    return spacing * full[:, cols - 1:2 * cols - 1]


def _angular_weights(angles_deg: Sequence[float]) -> np.ndarray:
    """Per-view angular spacing (radians): half the cyclic gap on each side."""
    a = np.radians(np.asarray(angles_deg, dtype=np.float64))
    nxt = np.roll(a, -1)
    nxt[-1] += 2 * np.pi
    prv = np.roll(a, 1)
    prv[0] -= 2 * np.pi
    return (nxt - prv) / 2.0


def fdk_reconstruct(projs: ProjectionSet, dims, voxel_mm: float) -> VolumeGrid:
    """Feldkamp-Davis-Kress reconstruction for a full circular scan.

    Cosine pre-weighting, Ram-Lak row filtering on a virtual detector through
    the isocenter, and distance-weighted voxel-driven backprojection.
    """
    if len(projs) < 2:
        raise ValueError(f"FDK needs at least 2 views, got {len(projs)}")
    geom = projs.geometry
    _check_extent(geom, dims, voxel_mm)
    grid = VolumeGrid.zeros(dims, voxel_mm)
    da = geom.pixel_pitch_mm * geom.sod_mm / geom.sdd_mm
    uo, vo = (o * geom.sod_mm / geom.sdd_mm for o in detector_offsets(geom))
    cosw = geom.sod_mm / np.sqrt(geom.sod_mm ** 2 + uo[None, :] ** 2 + vo[:, None] ** 2)
    dbeta = _angular_weights(projs.angles)
    acc = np.zeros(grid.values.shape, dtype=np.float64)
    lo = np.asarray(grid.origin_mm, dtype=np.float64)
    for im, db in zip(projs.images, dbeta):
        q = ramp_filter_rows(im.pixels.astype(np.float64) * cosw, da)
        _, _, u_hat, _ = view_frame(geom, im.angle_deg)
        th = math.radians(im.angle_deg)
        toward = np.array([math.sin(th), -math.cos(th), 0.0])
        _kernels.fdk_backproject_view(np.ascontiguousarray(q), lo, float(voxel_mm), float(geom.sod_mm),
                                      u_hat, toward, da, db / 2.0, acc)
    out = np.nan_to_num(np.maximum(acc, 0.0), nan=0.0, posinf=0.0, neginf=0.0)
    return VolumeGrid(out.astype(np.float32), grid.voxel_mm, grid.origin_mm)

