"""Circular cone-beam acquisition geometry, rays and ray sampling.

Conventions
-----------
* Rotation axis is z; sources travel on a circle of radius ``sod_mm`` in the
  z = 0 plane.  At view angle theta the source sits at
  ``sod * (sin theta, -cos theta, 0)`` (angle 0 puts it on the -y axis).
* The flat detector faces the source at distance ``sdd_mm``.  Its u-axis
  ``(cos theta, sin theta, 0)`` lies in the rotation plane and its v-axis is +z.
* Pixel ``(u, v)`` (column, row) has its center at offset
  ``((u - (cols-1)/2) * pitch, (v - (rows-1)/2) * pitch)`` from the detector
  center.
* The reconstruction volume is the cube ``[-extent, extent]^3`` centered on the
  isocenter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised when a geometry violates one of its constraints."""


@dataclass(frozen=True)
class ScanGeometry:
    angles_deg: tuple[float, ...]
    sod_mm: float
    sdd_mm: float
    det_rows: int
    det_cols: int
    pixel_pitch_mm: float
    volume_extent_mm: float

    def __post_init__(self):
        object.__setattr__(self, "angles_deg", tuple(float(a) for a in self.angles_deg))
        _validate(self)

    @property
    def n_views(self) -> int:
        return len(self.angles_deg)

    @property
    def magnification(self) -> float:
        return self.sdd_mm / self.sod_mm

    def with_angles(self, angles_deg: Sequence[float]) -> "ScanGeometry":
        return replace(self, angles_deg=tuple(sorted(float(a) % 360.0 for a in angles_deg)))

    def to_dict(self) -> dict:
        return {
            "angles_deg": list(self.angles_deg),
            "sod_mm": self.sod_mm,
            "sdd_mm": self.sdd_mm,
            "det_rows": self.det_rows,
            "det_cols": self.det_cols,
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "volume_extent_mm": self.volume_extent_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        if "angles_deg" not in d and "n_views" in d:
            return make_circular_geometry(
                d["n_views"], d["sod_mm"], d["sdd_mm"], d["det_rows"], d["det_cols"],
                d["pixel_pitch_mm"], d["volume_extent_mm"])
        return cls(
            angles_deg=tuple(d["angles_deg"]),
            sod_mm=float(d["sod_mm"]),
            sdd_mm=float(d["sdd_mm"]),
            det_rows=int(d["det_rows"]),
            det_cols=int(d["det_cols"]),
            pixel_pitch_mm=float(d["pixel_pitch_mm"]),
            volume_extent_mm=float(d["volume_extent_mm"]),
        )


def _validate(g: ScanGeometry) -> None:
    if not (g.sod_mm > 0):
        raise GeometryError(f"sod_mm must be > 0, got {g.sod_mm}")
    if not (g.sod_mm < g.sdd_mm):
        raise GeometryError(f"require sod_mm < sdd_mm, got sod={g.sod_mm}, sdd={g.sdd_mm}")
    if g.det_rows < 1 or g.det_cols < 1:
        raise GeometryError(f"detector must have >= 1 row and column, got {g.det_rows}x{g.det_cols}")
    if not (g.pixel_pitch_mm > 0):
        raise GeometryError(f"pixel_pitch_mm must be > 0, got {g.pixel_pitch_mm}")
    if not (g.volume_extent_mm > 0):
        raise GeometryError(f"volume_extent_mm must be > 0, got {g.volume_extent_mm}")
    a = np.asarray(g.angles_deg, dtype=np.float64)
    if a.size and (np.any(a < 0) or np.any(a >= 360) or not np.all(np.isfinite(a))):
        raise GeometryError("angles must lie in [0, 360)")
    if a.size > 1 and np.any(np.diff(a) <= 0):
        raise GeometryError("angles must be strictly increasing")


def make_circular_geometry(n_views: int, sod_mm: float, sdd_mm: float, det_rows: int,
                           det_cols: int, pixel_pitch_mm: float,
                           volume_extent_mm: float) -> ScanGeometry:
    """Uniformly spaced views on [0, 360): ``angle_k = k * 360 / n_views``."""
    if n_views < 1:
        raise GeometryError(f"n_views must be >= 1, got {n_views}")
    angles = tuple(k * 360.0 / n_views for k in range(n_views))
    return ScanGeometry(angles, float(sod_mm), float(sdd_mm), int(det_rows), int(det_cols),
                        float(pixel_pitch_mm), float(volume_extent_mm))


@dataclass(frozen=True)
class Ray:
    origin_mm: np.ndarray
    direction: np.ndarray

    def at(self, t: float) -> np.ndarray:
        return self.origin_mm + t * self.direction


@dataclass(frozen=True)
class SamplePoint:
    position_mm: np.ndarray
    t_mm: float
    dt_mm: float


# -- frames -----------------------------------------------------------------

def view_frame(geom: ScanGeometry, theta_deg: float):
    """Source position, detector center, and detector u/v unit vectors at ``theta_deg``."""
    th = math.radians(theta_deg)
    s, c = math.sin(th), math.cos(th)
    toward_source = np.array([s, -c, 0.0])
    source = geom.sod_mm * toward_source
    det_center = -(geom.sdd_mm - geom.sod_mm) * toward_source
    u_hat = np.array([c, s, 0.0])
    v_hat = np.array([0.0, 0.0, 1.0])
    return source, det_center, u_hat, v_hat


def detector_offsets(geom: ScanGeometry):
    """Pixel-center offsets (mm) along u for columns and along v for rows."""
    u = (np.arange(geom.det_cols) - (geom.det_cols - 1) / 2.0) * geom.pixel_pitch_mm
    v = (np.arange(geom.det_rows) - (geom.det_rows - 1) / 2.0) * geom.pixel_pitch_mm
    return u, v


def _resolve_angle(geom: ScanGeometry, view_index: Optional[int], theta_deg: Optional[float]) -> float:
    if theta_deg is not None:
        return float(theta_deg)
    if view_index is None:
        raise GeometryError("either view_index or theta_deg is required")
    if not 0 <= view_index < geom.n_views:
        raise IndexError(f"view_index {view_index} out of range [0, {geom.n_views})")
    return geom.angles_deg[view_index]


def ray_for_pixel(geom: ScanGeometry, view_index: Optional[int], u: int, v: int,
                  theta_deg: Optional[float] = None) -> Ray:
    """Ray from the source through the center of pixel (column ``u``, row ``v``).

    Pass ``theta_deg`` (with ``view_index=None``) to build rays for angles that
    are not part of the acquisition, e.g. synthesized views.
    """
    if not (0 <= u < geom.det_cols and 0 <= v < geom.det_rows):
        raise IndexError(f"pixel ({u}, {v}) outside detector {geom.det_cols}x{geom.det_rows}")
    theta = _resolve_angle(geom, view_index, theta_deg)
    source, det_center, u_hat, v_hat = view_frame(geom, theta)
    du = (u - (geom.det_cols - 1) / 2.0) * geom.pixel_pitch_mm
    dv = (v - (geom.det_rows - 1) / 2.0) * geom.pixel_pitch_mm
    target = det_center + du * u_hat + dv * v_hat
    d = target - source
    return Ray(source, d / np.linalg.norm(d))


def view_rays(geom: ScanGeometry, theta_deg: float):
    """All rays of one view.

    Returns
    -------
    origin : (3,) array
    directions : (rows, cols, 3) array of unit vectors
    """
    source, det_center, u_hat, v_hat = view_frame(geom, theta_deg)
    uo, vo = detector_offsets(geom)
    pts = (det_center[None, None, :] + uo[None, :, None] * u_hat[None, None, :]
           + vo[:, None, None] * v_hat[None, None, :])
    d = pts - source
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return source, d


# -- intersection and sampling ---------------------------------------------

def ray_entry_exit(ray: Ray, extent_mm: float) -> Optional[tuple[float, float]]:
    """Slab intersection of ``ray`` with the cube ``[-extent, extent]^3``.

    Returns ``None`` for misses and zero-length (grazing) chords.
    """
    t0, t1 = entry_exit_many(ray.origin_mm[None, :], ray.direction[None, :], extent_mm)
    if not t1[0] > t0[0]:
        return None
    return float(t0[0]), float(t1[0])


def entry_exit_many(origins: np.ndarray, directions: np.ndarray, extent_mm: float):
    """Vectorized slab test; misses come back with ``t1 <= t0`` (both 0).

    ``origins`` may be (3,) or (N, 3); ``directions`` is (N, 3).
    """
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (-extent_mm - o) * inv
        tb = (extent_mm - o) * inv
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    # Axis-parallel rays: inside the slab -> unbounded, outside -> empty.
    parallel = d == 0
    inside = np.abs(o) <= extent_mm
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t0 = np.maximum(lo.max(axis=-1), 0.0)
    t1 = hi.min(axis=-1)
    hit = t1 > t0
    return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0)


def sample_ray(ray: Ray, t0_mm: float, t1_mm: float, n_samples: int) -> list[SamplePoint]:
    """Midpoint-rule samples ``t_i = t0 + (i - 1/2) * dt`` with ``dt = (t1 - t0) / n``."""
    if not t0_mm < t1_mm:
        raise ValueError(f"empty sampling interval: t0={t0_mm} >= t1={t1_mm}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    dt = (t1_mm - t0_mm) / n_samples
    ts = t0_mm + (np.arange(n_samples) + 0.5) * dt
    return [SamplePoint(ray.origin_mm + t * ray.direction, float(t), dt) for t in ts]


def rotation_z(delta_deg: float) -> np.ndarray:
    th = math.radians(delta_deg)
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
