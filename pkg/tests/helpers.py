"""Shared oracles and fixtures-by-function for the test suite."""
from __future__ import annotations

import numpy as np

from ctfield.field import (FieldConfig, HashEncodingConfig, RayBatch, _field_forward, _sample_points,
                           init_field_params, loss_and_gradients)
from ctfield.geometry import entry_exit_many, make_circular_geometry, view_rays

# criterion number -> printed PASS/FAIL line, filled by test_acceptance
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


SMALL_FIELD = FieldConfig(HashEncodingConfig(n_levels=4, features_per_level=2, table_size=2 ** 12,
                                             base_resolution=4, per_level_scale=2.0),
                          hidden_width=16, hidden_layers=2, mu_init=0.01)


def sphere_geometry(n_views: int, extent: float = 128.0):
    return make_circular_geometry(n_views, 1000, 1500, 64, 64, 4.0, extent)


def random_batch(rng: np.random.Generator, n_rays: int = 12, extent: float = 128.0) -> RayBatch:
    g = make_circular_geometry(8, 1000, 1500, 16, 16, 12.0, extent)
    src, d = view_rays(g, float(rng.uniform(0, 360)))
    d = d.reshape(-1, 3)
    idx = rng.choice(d.shape[0], n_rays, replace=False)
    return RayBatch(np.broadcast_to(src, (n_rays, 3)).copy(), d[idx],
                    rng.uniform(0.0, 2.0, n_rays), rng.choice([1.0, 0.5], n_rays))


def gradient_check(seed: int = 0, n_probes: int = 100, h: float = 1e-3, config: FieldConfig = SMALL_FIELD,
                   n_samples: int = 8, n_rays: int = 8) -> np.ndarray:
    """Relative errors of analytic vs central-difference gradients (float64).

    Probes are spread evenly over every hash level and every MLP weight and
    bias array.  Hash entries are drawn among those the batch touches, since
    the rest have an exact zero gradient on both sides; within a group, probes
    skip entries whose gradient is below 1e-3 of the group maximum, where the
    finite difference is dominated by truncation error.  Tables are drawn from
    U(-1, 1) so pre-activations are O(1).  A central difference is only valid
    where the loss is smooth on ``[x - h, x + h]``, so a probe whose step flips
    any ReLU is discarded and redrawn.
    """
    rng = np.random.default_rng(seed)
    params = init_field_params(config, seed, dtype=np.float64)
    # a larger last layer so every group has a non-negligible gradient
    params.hash_tables = rng.uniform(-1.0, 1.0, params.hash_tables.shape)
    params.weights[-1] *= 30.0
    batch = random_batch(rng, n_rays)
    extent = 128.0
    _, grads = loss_and_gradients(params, config, batch, n_samples, extent)
    t0, t1 = entry_exit_many(batch.origins, batch.directions, extent)
    pts, _ = _sample_points(batch.origins, batch.directions, t0, t1, n_samples, extent, np.float64)

    def pattern():
        _, _, cache = _field_forward(params, config.encoding, pts)
        return np.concatenate([(c > 0).ravel() for c in cache[1:]])

    groups = []
    for lvl in range(config.encoding.n_levels):
        groups.append(("table", lvl))
    for k in range(len(params.weights)):
        groups.append(("W", k))
        groups.append(("b", k))

    def target(kind, k):
        if kind == "table":
            return params.hash_tables[k], grads.hash_tables[k]
        if kind == "W":
            return params.weights[k], grads.weights[k]
        return params.biases[k], grads.biases[k]

    errors = []
    i = 0
    while len(errors) < n_probes:
        kind, k = groups[len(errors) % len(groups)]
        arr, g = target(kind, k)
        nz = np.flatnonzero(np.abs(g) > 1e-3 * np.abs(g).max())
        flat = int(rng.choice(nz)) if nz.size else int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        lp, _ = loss_and_gradients(params, config, batch, n_samples, extent)
        pp = pattern()
        arr[idx] = old - h
        lm, _ = loss_and_gradients(params, config, batch, n_samples, extent)
        pm = pattern()
        arr[idx] = old
        i += 1
        if i > 20 * n_probes:
            raise RuntimeError("too many probes straddle a ReLU kink")
        if not np.array_equal(pp, pm):
            continue
        fd = (lp - lm) / (2 * h)
        an = g[idx]
        errors.append(abs(an - fd) / max(abs(an), abs(fd), 1e-10))
    return np.array(errors)
