"""Neural attenuation field: hash-grid encoding, MLP, ray integrals and training.

The forward and reverse passes are written out by hand.  Hash-grid gathers and
scatters run in compiled kernels; the MLP is plain numpy.  Training uses Adam
with separate learning rates for the hash tables and the MLP.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels
from .geometry import Ray, ScanGeometry, entry_exit_many, view_rays
from .phantom import VolumeGrid, _dims3
from .projector import ProjectionSet

log = logging.getLogger(__name__)

DEFAULT_PRIMES = (1, 2654435761, 805459861)


class DomainError(ValueError):
    """A query point lies outside the normalized unit cube."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class HashEncodingConfig:
    n_levels: int = 8
    features_per_level: int = 2
    table_size: int = 2 ** 16
    base_resolution: int = 16
    per_level_scale: float = 1.5
    hash_primes: tuple[int, int, int] = DEFAULT_PRIMES

    def __post_init__(self):
        if self.n_levels < 1 or self.features_per_level < 1:
            raise ValueError("n_levels and features_per_level must be >= 1")
        T = self.table_size
        if T < 1 or T & (T - 1):
            raise ValueError(f"table_size must be a power of two, got {T}")
        if not self.per_level_scale > 1:
            raise ValueError("per_level_scale must be > 1")
        if len(self.hash_primes) != 3 or any(p % 2 == 0 for p in self.hash_primes):
            raise ValueError("hash_primes must be three odd integers")

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.features_per_level

    def resolutions(self) -> np.ndarray:
        return np.array([math.floor(self.base_resolution * self.per_level_scale ** l)
                         for l in range(self.n_levels)], dtype=np.float64)

    def primes(self) -> np.ndarray:
        return np.array(self.hash_primes, dtype=np.uint64)


@dataclass(frozen=True)
class FieldConfig:
    encoding: HashEncodingConfig = field(default_factory=HashEncodingConfig)
    hidden_width: int = 64
    hidden_layers: int = 2
    mu_init: float = 0.01

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoding"]["hash_primes"] = list(self.encoding.hash_primes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        enc = dict(d.get("encoding", {}))
        if "hash_primes" in enc:
            enc["hash_primes"] = tuple(enc["hash_primes"])
        rest = {k: v for k, v in d.items() if k != "encoding"}
        return cls(encoding=HashEncodingConfig(**enc), **rest)


@dataclass
class FieldParams:
    """Hash tables (L, T, F) plus MLP weights ``W_k`` (in, out) and biases."""

    hash_tables: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order."""
        out = [self.hash_tables]
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "FieldParams":
        rest = list(arrays[1:])
        return cls(arrays[0], rest[0::2], rest[1::2])

    def copy(self) -> "FieldParams":
        return FieldParams.from_arrays([a.copy() for a in self.arrays()])

    def astype(self, dtype) -> "FieldParams":
        return FieldParams.from_arrays([a.astype(dtype) for a in self.arrays()])

    def zeros_like(self) -> "FieldParams":
        return FieldParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def equals(self, other: "FieldParams") -> bool:
        return all(a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.arrays(), other.arrays()))


def init_field_params(config: FieldConfig = FieldConfig(), seed: int = 0,
                      dtype=np.float32) -> FieldParams:
    rng = np.random.default_rng(seed)
    enc = config.encoding
    tables = rng.uniform(-1e-4, 1e-4, size=(enc.n_levels, enc.table_size, enc.features_per_level))
    sizes = [enc.output_dim] + [config.hidden_width] * config.hidden_layers + [1]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        std = math.sqrt(2.0 / fan_in) * (0.01 if last else 1.0)
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    biases[-1][:] = math.log(math.expm1(config.mu_init))
    return FieldParams(tables, weights, biases).astype(dtype)


# -- forward / reverse passes ---------------------------------------------

def _check_params(params: FieldParams, config: FieldConfig) -> None:
    enc = config.encoding
    expect = (enc.n_levels, enc.table_size, enc.features_per_level)
    if params.hash_tables.shape != expect:
        raise ValueError(f"hash tables have shape {params.hash_tables.shape}, config expects {expect}")


def encode(config: HashEncodingConfig | FieldConfig, tables: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multiresolution hash features of points in [0, 1]^3.

    ``points`` may be a single 3-vector or an (N, 3) array.  Returns (L*F,)
    or (N, L*F), levels concatenated coarse to fine.
    """
    enc = config.encoding if isinstance(config, FieldConfig) else config
    pts = np.asarray(points)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts).astype(tables.dtype, copy=False)
    if np.any(pts < 0) or np.any(pts > 1) or not np.all(np.isfinite(pts)):
        raise DomainError("encode expects points inside [0, 1]^3")
    out = _encode_unchecked(enc, tables, pts)
    return out[0] if single else out


def _encode_unchecked(enc: HashEncodingConfig, tables: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = np.empty((pts.shape[0], enc.output_dim), dtype=tables.dtype)
    _kernels.hash_encode(np.ascontiguousarray(pts), enc.resolutions(), enc.primes(),
                         np.ascontiguousarray(tables), out)
    return out


def _softplus(z):
    return np.logaddexp(0.0, z).astype(z.dtype, copy=False)


def _mlp_forward(params: FieldParams, feats: np.ndarray):
    h = feats
    cache = [h]
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ W + b, 0)
        cache.append(h)
    z = (h @ params.weights[-1] + params.biases[-1])[:, 0]
    return z, cache


def _field_forward(params: FieldParams, enc: HashEncodingConfig, pts: np.ndarray):
    feats = _encode_unchecked(enc, params.hash_tables, pts)
    z, cache = _mlp_forward(params, feats)
    return _softplus(z), z, cache


def _field_backward(params: FieldParams, enc: HashEncodingConfig, pts: np.ndarray,
                    z: np.ndarray, cache: list, d_mu: np.ndarray) -> FieldParams:
    """Reverse pass from d(loss)/d(mu) per point to parameter gradients."""
    dz = (d_mu * expit(z)).astype(z.dtype)[:, None]
    n_layers = len(params.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    g = dz
    for k in range(n_layers - 1, -1, -1):
        h_in = cache[k]
        gW[k] = h_in.T @ g
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
        if k > 0:
            g = g * (cache[k] > 0)
    g_tables = np.zeros_like(params.hash_tables)
    _kernels.hash_encode_backward(np.ascontiguousarray(pts), enc.resolutions(), enc.primes(),
                                  np.ascontiguousarray(g), g_tables)
    return FieldParams(g_tables, gW, gb)


def predict_mu(params: FieldParams, config: FieldConfig, points: np.ndarray) -> np.ndarray | float:
    """Attenuation (1/mm) at normalized points; softplus keeps it >= 0."""
    _check_params(params, config)
    pts = np.asarray(points)
    single = pts.ndim == 1
    feats = np.atleast_2d(encode(config, params.hash_tables, pts))
    z, _ = _mlp_forward(params, feats)
    mu = _softplus(z)
    return float(mu[0]) if single else mu


def to_unit(points_mm: np.ndarray, extent_mm: float) -> np.ndarray:
    return (points_mm + extent_mm) / (2.0 * extent_mm)


# -- rays --------------------------------------------------------------------

@dataclass
class RayBatch:
    """Rays with supervision targets and per-ray loss weights."""

    origins: np.ndarray
    directions: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_tuples(cls, items: Iterable[tuple[Ray, float, float]]) -> "RayBatch":
        items = list(items)
        return cls(np.array([r.origin_mm for r, _, _ in items], dtype=np.float64),
                   np.array([r.direction for r, _, _ in items], dtype=np.float64),
                   np.array([t for _, t, _ in items], dtype=np.float64),
                   np.array([w for _, _, w in items], dtype=np.float64))

    def __len__(self) -> int:
        return self.directions.shape[0]


def _sample_points(origins, dirs, t0, t1, n_samples, extent_mm, dtype, jitter=None):
    """Unit-cube sample positions (B*N, 3) and spacings (B, N)."""
    dt = (t1 - t0) / n_samples
    offs = (np.arange(n_samples) + 0.5)[None, :] if jitter is None else np.arange(n_samples)[None, :] + jitter
    t = t0[:, None] + offs * dt[:, None]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    u = np.clip(to_unit(pts, extent_mm), 0.0, 1.0).reshape(-1, 3).astype(dtype)
    return u, np.broadcast_to(dt[:, None], t.shape)


def render_rays(params: FieldParams, config: FieldConfig, origins: np.ndarray, directions: np.ndarray,
                n_samples: int, extent_mm: float, chunk: int = 4096) -> np.ndarray:
    """Predicted line integrals ``sum_i mu(s_i) dt_i``; 0 for rays missing the cube."""
    _check_params(params, config)
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape)
    t0, t1 = entry_exit_many(o, d, extent_mm)
    out = np.zeros(d.shape[0], dtype=np.float64)
    hit = np.nonzero(t1 > t0)[0]
    dtype = params.hash_tables.dtype
    for s in range(0, hit.size, chunk):
        idx = hit[s:s + chunk]
        pts, dt = _sample_points(o[idx], d[idx], t0[idx], t1[idx], n_samples, extent_mm, dtype)
        mu, _, _ = _field_forward(params, config.encoding, pts)
        out[idx] = np.sum(mu.reshape(dt.shape).astype(np.float64) * dt, axis=1)
    return out


def predict_ray_integral(params: FieldParams, config: FieldConfig, ray: Ray, n_samples: int,
                         extent_mm: float) -> float:
    return float(render_rays(params, config, ray.origin_mm[None, :], ray.direction[None, :],
                             n_samples, extent_mm)[0])


def loss_and_gradients(params: FieldParams, config: FieldConfig, batch: RayBatch, n_samples: int,
                       extent_mm: float, jitter: Optional[np.ndarray] = None):
    """Weighted squared error ``mean(w * (target - I_pred)^2)`` and its gradient.

    Sample positions are treated as constants.  ``jitter`` (B, N) in [0, 1)
    shifts each sample within its bin; ``None`` uses bin midpoints.
    """
    if len(batch) == 0:
        raise ValueError("empty ray batch")
    dtype = params.hash_tables.dtype
    o = np.broadcast_to(np.asarray(batch.origins, dtype=np.float64), batch.directions.shape)
    d = np.asarray(batch.directions, dtype=np.float64)
    t0, t1 = entry_exit_many(o, d, extent_mm)
    pts, dt = _sample_points(o, d, t0, t1, n_samples, extent_mm, dtype, jitter)
    mu, z, cache = _field_forward(params, config.encoding, pts)
    dt = dt.astype(dtype)
    pred = np.sum(mu.reshape(dt.shape) * dt, axis=1)
    resid = pred - batch.targets.astype(dtype)
    w = batch.weights.astype(dtype)
    B = len(batch)
    loss = float(np.sum(w * resid * resid) / B)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    d_pred = 2.0 * w * resid / B
    d_mu = (d_pred[:, None] * dt).reshape(-1).astype(dtype)
    grads = _field_backward(params, config.encoding, pts, z, cache, d_mu)
    return loss, grads


# -- optimizer -------------------------------------------------------------

class Adam:
    """Adam over a FieldParams with one learning rate for the tables and one for the MLP."""

    def __init__(self, params: FieldParams, lr_tables: float, lr_mlp: float,
                 betas=(0.9, 0.99), eps: float = 1e-15):
        self.lr_tables = lr_tables
        self.lr_mlp = lr_mlp
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: FieldParams, grads: FieldParams, scale: float = 1.0) -> list[np.ndarray]:
        """In-place update; returns the applied steps (for inspection)."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        steps = []
        for i, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
            lr = (self.lr_tables if i == 0 else self.lr_mlp) * scale
            m, v = self.m[i], self.v[i]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            s = (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p -= s
            steps.append(s)
        return steps


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps_per_outer_iter: int = 1500
    rays_per_batch: int = 256
    samples_per_ray: int = 64
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    lr_final_fraction: float = 0.1
    w1: float = 1.0
    w2: float = 0.5
    rng_seed: int = 0
    jitter: bool = True
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if self.steps_per_outer_iter < 1:
            raise ValueError("steps_per_outer_iter must be >= 1")
        if not (self.w1 > 0 and self.w2 > 0):
            raise ValueError("w1 and w2 must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field"] = self.field.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        fc = FieldConfig.from_dict(d.pop("field")) if "field" in d else FieldConfig()
        return cls(field=fc, **d)


class _RayTable:
    """Flattened rays of a projection set with their targets and weights."""

    def __init__(self, projs: ProjectionSet):
        geom = projs.geometry
        n_pix = geom.det_rows * geom.det_cols
        origins, dirs, targets, weights = [], [], [], []
        for im in projs.images:
            src, d = view_rays(geom, im.angle_deg)
            dirs.append(d.reshape(-1, 3))
            origins.append(np.broadcast_to(src, (n_pix, 3)))
            targets.append(im.pixels.reshape(-1).astype(np.float64))
            weights.append(np.full(n_pix, im.weight, dtype=np.float64))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.targets = np.concatenate(targets)
        self.weights = np.concatenate(weights)

    def __len__(self):
        return self.targets.shape[0]

    def batch(self, idx: np.ndarray) -> RayBatch:
        return RayBatch(self.origins[idx], self.dirs[idx], self.targets[idx], self.weights[idx])


def train_field(projs: ProjectionSet, config: TrainConfig = TrainConfig(),
                init: Optional[FieldParams] = None, loss_log: Optional[list] = None) -> FieldParams:
    """Fit the field to ``projs`` with Adam over random ray batches.

    Rays are drawn uniformly over all pixels of all images, so every image
    contributes in proportion to its pixel count and each ray carries its
    image's weight.  ``init`` warm-starts from existing parameters (copied).
    The result depends only on the inputs and ``config.rng_seed``.
    """
    if len(projs) == 0:
        raise ValueError("train_field needs at least one projection")
    params = init.copy() if init is not None else init_field_params(config.field, config.rng_seed)
    _check_params(params, config.field)
    extent = projs.geometry.volume_extent_mm
    table = _RayTable(projs)
    rng = np.random.default_rng([config.rng_seed, 0x4E4146])
    opt = Adam(params, config.lr_tables, config.lr_mlp)
    n = config.steps_per_outer_iter
    B = min(config.rays_per_batch, len(table))
    for step in range(n):
        idx = rng.integers(0, len(table), size=B)
        jitter = rng.random((B, config.samples_per_ray)) if config.jitter else None
        loss, grads = loss_and_gradients(params, config.field, table.batch(idx),
                                         config.samples_per_ray, extent, jitter)
        frac = step / max(n - 1, 1)
        opt.step(params, grads, scale=1.0 - (1.0 - config.lr_final_fraction) * frac)
        if loss_log is not None:
            loss_log.append(loss)
        if step % 500 == 0:
            log.debug("step %d loss %.6g", step, loss)
    return params


def render_volume(params: FieldParams, config: FieldConfig, dims, voxel_mm: float,
                  extent_mm: float, chunk: int = 65536) -> VolumeGrid:
    """Evaluate the field at every voxel center of a centered grid."""
    grid = VolumeGrid.zeros(_dims3(dims), voxel_mm)
    pts = to_unit(grid.voxel_centers().reshape(-1, 3), extent_mm)
    pts = np.clip(pts, 0.0, 1.0).astype(params.hash_tables.dtype)
    out = np.empty(pts.shape[0], dtype=np.float32)
    for s in range(0, pts.shape[0], chunk):
        mu, _, _ = _field_forward(params, config.encoding, pts[s:s + chunk])
        out[s:s + chunk] = mu
    grid.values = out.reshape(grid.values.shape)
    return grid


def render_projection(params: FieldParams, config: FieldConfig, geom: ScanGeometry, theta_deg: float,
                      n_samples: int) -> np.ndarray:
    src, d = view_rays(geom, theta_deg)
    vals = render_rays(params, config, src, d.reshape(-1, 3), n_samples, geom.volume_extent_mm)
    return vals.reshape(geom.det_rows, geom.det_cols)
