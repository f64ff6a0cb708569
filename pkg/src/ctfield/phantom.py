"""Analytic ellipsoid phantoms, voxelization, and exact line integrals."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .geometry import Ray, entry_exit_many


@dataclass(frozen=True)
class EllipsoidSpec:
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]
    mu: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        axes = np.asarray(self.semi_axes_mm, dtype=np.float64)
        if axes.shape != (3,) or np.any(axes <= 0):
            raise ValueError(f"semi-axes must be three positive numbers, got {self.semi_axes_mm}")
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "rotation", R)

    @classmethod
    def sphere(cls, center_mm, radius_mm: float, mu: float) -> "EllipsoidSpec":
        return cls(tuple(center_mm), (radius_mm, radius_mm, radius_mm), mu)

    def to_dict(self) -> dict:
        return {"center_mm": list(self.center_mm), "semi_axes_mm": list(self.semi_axes_mm),
                "mu": self.mu, "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EllipsoidSpec":
        return cls(tuple(d["center_mm"]), tuple(d["semi_axes_mm"]), float(d["mu"]),
                   np.asarray(d.get("rotation", np.eye(3)), dtype=np.float64))


@dataclass
class VolumeGrid:
    """Dense attenuation map.

    ``values`` has shape ``(nz, ny, nx)`` (z slowest) and ``origin_mm`` is the
    center of voxel (0, 0, 0) in (x, y, z) order.
    """

    values: np.ndarray
    voxel_mm: float
    origin_mm: tuple[float, float, float]

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    @property
    def half_extent_mm(self) -> np.ndarray:
        return np.array(self.dims, dtype=np.float64) * self.voxel_mm / 2.0

    @classmethod
    def centered(cls, values: np.ndarray, voxel_mm: float) -> "VolumeGrid":
        nz, ny, nx = values.shape
        origin = tuple(-(n - 1) * voxel_mm / 2.0 for n in (nx, ny, nz))
        return cls(values, float(voxel_mm), origin)

    @classmethod
    def zeros(cls, dims, voxel_mm: float) -> "VolumeGrid":
        nx, ny, nz = _dims3(dims)
        return cls.centered(np.zeros((nz, ny, nx), dtype=np.float32), voxel_mm)

    def voxel_centers(self) -> np.ndarray:
        """(nz, ny, nx, 3) array of voxel-center positions in mm (x, y, z)."""
        nx, ny, nz = self.dims
        xs = self.origin_mm[0] + np.arange(nx) * self.voxel_mm
        ys = self.origin_mm[1] + np.arange(ny) * self.voxel_mm
        zs = self.origin_mm[2] + np.arange(nz) * self.voxel_mm
        Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)


def _dims3(dims) -> tuple[int, int, int]:
    if np.isscalar(dims):
        dims = (int(dims),) * 3
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) < 1:
        raise ValueError(f"dims must be >= 1 per axis, got {dims}")
    return nx, ny, nz


def make_phantom(specs: Sequence[EllipsoidSpec], dims, voxel_mm: float) -> VolumeGrid:
    """Voxelize ellipsoids by voxel-center membership; overlapping densities add."""
    if voxel_mm <= 0:
        raise ValueError("voxel_mm must be > 0")
    vol = VolumeGrid.zeros(dims, voxel_mm)
    if not specs:
        return vol
    pts = vol.voxel_centers()
    acc = np.zeros(vol.values.shape, dtype=np.float64)
    for e in specs:
        local = (pts - np.asarray(e.center_mm)) @ e.rotation  # world -> ellipsoid frame
        q = np.sum((local / np.asarray(e.semi_axes_mm)) ** 2, axis=-1)
        acc[q <= 1.0] += e.mu
    vol.values = acc.astype(np.float32)
    return vol


def analytic_line_integrals(specs: Sequence[EllipsoidSpec], origins: np.ndarray,
                            directions: np.ndarray) -> np.ndarray:
    """Exact sum of ``mu * chord`` over ellipsoids for many rays at once."""
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape)
    total = np.zeros(d.shape[0])
    for e in specs:
        inv_axes = 1.0 / np.asarray(e.semi_axes_mm)
        lo = ((o - np.asarray(e.center_mm)) @ e.rotation) * inv_axes
        ld = (d @ e.rotation) * inv_axes
        a = np.sum(ld * ld, axis=-1)
        b = 2.0 * np.sum(lo * ld, axis=-1)
        c = np.sum(lo * lo, axis=-1) - 1.0
        disc = b * b - 4 * a * c
        chord = np.where(disc > 0, np.sqrt(np.maximum(disc, 0.0)) / a, 0.0)
        # Directions are unit vectors in world space, so the root gap is a length in mm.
        total += e.mu * chord
    return total


def analytic_line_integral(specs: Sequence[EllipsoidSpec], ray: Ray) -> float:
    return float(analytic_line_integrals(specs, ray.origin_mm[None, :], ray.direction[None, :])[0])


def volume_bounds(volume: VolumeGrid) -> float:
    """Half extent of the cube enclosing the volume's voxel footprint."""
    return float(np.max(volume.half_extent_mm))


def line_integrals(volume: VolumeGrid, origins: np.ndarray, directions: np.ndarray,
                   n_samples: int, extent_mm: float | None = None) -> np.ndarray:
    """Vectorized discrete line integrals (trilinear, zero padded, midpoint rule)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape))
    ext = volume_bounds(volume) if extent_mm is None else float(extent_mm)
    t0, t1 = entry_exit_many(o, d, ext)
    out = np.empty(d.shape[0], dtype=np.float64)
    _kernels.march_forward(np.ascontiguousarray(volume.values), np.asarray(volume.origin_mm, dtype=np.float64),
                           float(volume.voxel_mm), o, d, t0, t1, int(n_samples), out)
    return out


def discrete_line_integral(volume: VolumeGrid, ray: Ray, n_samples: int) -> float:
    return float(line_integrals(volume, ray.origin_mm, ray.direction[None, :], n_samples)[0])


# -- preset phantoms -------------------------------------------------------

def sphere_specs(radius_mm: float = 32.0, mu: float = 0.02) -> list[EllipsoidSpec]:
    return [EllipsoidSpec.sphere((0.0, 0.0, 0.0), radius_mm, mu)]


def two_sphere_specs() -> list[EllipsoidSpec]:
    """Body sphere (r = 120 mm) with an off-center insert, sized for a 64^3 x 4 mm grid.

    The body is wider than the detector field of view, so no ray grazes its
    silhouette; only the insert has an edge inside the field of view.
    """
    return [
        EllipsoidSpec.sphere((0.0, 0.0, 0.0), 120.0, 0.02),
        EllipsoidSpec.sphere((20.0, -10.0, 5.0), 60.0, 0.01),
    ]


def structured_sphere_specs() -> list[EllipsoidSpec]:
    """Sphere phantom with internal structure used by the desk-scale experiments.

    A soft-tissue ball (r = 52 mm) holding a denser shell-like ellipsoid, two
    low-density cavities and a few small high-contrast inserts.  Densities are
    additive and stay non-negative everywhere.
    """
    rz = _rot_z(25.0)
    return [
        EllipsoidSpec.sphere((0.0, 0.0, 0.0), 52.0, 0.020),
        EllipsoidSpec((0.0, 0.0, 0.0), (40.0, 30.0, 36.0), 0.006, rz),
        EllipsoidSpec((-14.0, 6.0, 4.0), (10.0, 16.0, 12.0), -0.012, _rot_z(-30.0)),
        EllipsoidSpec((16.0, -4.0, -8.0), (9.0, 9.0, 14.0), -0.010),
        EllipsoidSpec.sphere((6.0, 20.0, 12.0), 6.0, 0.020),
        EllipsoidSpec.sphere((-4.0, -20.0, -14.0), 5.0, 0.016),
        EllipsoidSpec.sphere((22.0, 14.0, 20.0), 4.0, 0.018),
        EllipsoidSpec((0.0, 0.0, -30.0), (20.0, 12.0, 5.0), 0.010, _rot_z(60.0)),
    ]


def _rot_z(deg: float) -> np.ndarray:
    th = np.radians(deg)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


PRESETS = {
    "sphere": sphere_specs,
    "two-sphere": two_sphere_specs,
    "structured": structured_sphere_specs,
}
