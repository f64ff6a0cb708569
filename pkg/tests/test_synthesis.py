from __future__ import annotations

import math

import numpy as np
import pytest
from helpers import SMALL_FIELD

from ctfield.field import FieldConfig, TrainConfig, init_field_params, train_field
from ctfield.geometry import make_circular_geometry
from ctfield.phantom import make_phantom, sphere_specs
from ctfield.projector import PSEUDO, forward_project
from ctfield.synthesis import (DegenerateGapError, DimensionMismatchError, candidate_interval,
                               gradient_dissimilarity, known_gaps, n_new_for_ratio, select_views_apgps,
                               synthesize_projection)

GEOM = make_circular_geometry(8, 1000, 1500, 16, 16, 12.0, 64.0)


def field_with_bias(bias: float):
    p = init_field_params(SMALL_FIELD, 0, dtype=np.float64)
    p.weights[-1][:] = 0.0
    p.biases[-1][:] = bias
    return p


def test_candidate_interval_examples():
    iv = candidate_interval(0.0, 18.0, 4)
    assert (iv.lo_deg, iv.hi_deg) == (4.5, 13.5)
    iv = candidate_interval(10.0, 20.0, 4)
    assert (iv.lo_deg, iv.hi_deg) == (12.5, 17.5)
    iv = candidate_interval(0.0, 18.0, 1000)
    assert iv.hi_deg - iv.lo_deg == pytest.approx(0.036, abs=1e-12)


def test_candidate_interval_symmetry_and_errors():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t0 = rng.uniform(0, 300)
        t1 = t0 + rng.uniform(0.1, 60)
        iv = candidate_interval(t0, t1, rng.uniform(2.01, 50))
        assert iv.midpoint - iv.lo_deg == iv.hi_deg - iv.midpoint
        assert t0 < iv.lo_deg < iv.hi_deg < t1
    with pytest.raises(DegenerateGapError):
        candidate_interval(5.0, 5.0)
    with pytest.raises(ValueError):
        candidate_interval(10.0, 5.0)
    with pytest.raises(ValueError):
        candidate_interval(0.0, 10.0, a=2.0)


def brute_force_dissimilarity(p, l, r):
    def grad(img):
        rows, cols = img.shape
        gr = np.zeros_like(img)
        gc = np.zeros_like(img)
        for i in range(rows):
            for j in range(cols):
                if i == 0:
                    gr[i, j] = img[1, j] - img[0, j]
                elif i == rows - 1:
                    gr[i, j] = img[i, j] - img[i - 1, j]
                else:
                    gr[i, j] = (img[i + 1, j] - img[i - 1, j]) / 2
                if j == 0:
                    gc[i, j] = img[i, 1] - img[i, 0]
                elif j == cols - 1:
                    gc[i, j] = img[i, j] - img[i, j - 1]
                else:
                    gc[i, j] = (img[i, j + 1] - img[i, j - 1]) / 2
        return gr, gc

    (pr, pc), (lr_, lc), (rr, rc) = grad(p), grad(l), grad(r)
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            dr = pr[i, j] - (lr_[i, j] + rr[i, j]) / 2
            dc = pc[i, j] - (lc[i, j] + rc[i, j]) / 2
            total += math.sqrt(dr * dr + dc * dc)
    return total / p.size


def test_gradient_dissimilarity_examples():
    rng = np.random.default_rng(1)
    const = [np.full((6, 7), c) for c in (1.0, 2.0, -3.0)]
    assert gradient_dissimilarity(*const) == 0.0
    left, right = rng.normal(size=(2, 9, 11))
    avg = (left + right) / 2
    assert gradient_dissimilarity(avg, left, right) == pytest.approx(0.0, abs=1e-12)
    assert gradient_dissimilarity(avg + 4.2, left, right) == pytest.approx(0.0, abs=1e-12)
    assert gradient_dissimilarity(left, left, right) == pytest.approx(
        brute_force_dissimilarity(left, left, right), rel=1e-12)
    p = rng.normal(size=(9, 11))
    assert gradient_dissimilarity(p, left, right) == pytest.approx(
        brute_force_dissimilarity(p, left, right), rel=1e-12)
    assert gradient_dissimilarity(p, left, right) > 0
    with pytest.raises(DimensionMismatchError):
        gradient_dissimilarity(p, left, right[:, :5])


def test_synthesize_zero_and_constant_fields():
    zero = synthesize_projection(field_with_bias(-1000.0), SMALL_FIELD, GEOM, 10.0)
    assert zero.provenance == PSEUDO and zero.weight == 0.5
    assert np.all(zero.pixels == 0)
    const = field_with_bias(math.log(math.expm1(0.02)))
    for theta in (0.0, 45.0):
        img = synthesize_projection(const, SMALL_FIELD, GEOM, theta).pixels
        assert img.max() > 0
        np.testing.assert_allclose(img, img[:, ::-1], atol=1e-9)
    with pytest.raises(ValueError):
        synthesize_projection(const, SMALL_FIELD, GEOM, 360.0)


def test_known_gaps_and_ratio():
    assert known_gaps([90.0, 0.0, 180.0]) == [(0.0, 90.0), (90.0, 180.0), (180.0, 360.0)]
    assert [n_new_for_ratio(r, 20) for r in (0.25, 0.5, 1, 2)] == [5, 10, 20, 40]


def _check_inside(angles, known, per_gap_ok=1):
    known = sorted(known)
    counts = {}
    for ang in angles:
        hit = None
        for t0, t1 in known_gaps(known):
            iv = candidate_interval(t0, t1)
            if iv.contains(ang):
                hit = (t0, t1)
        assert hit is not None, ang
        counts[hit] = counts.get(hit, 0) + 1
    assert max(counts.values()) <= per_gap_ok
    return counts


def test_select_tie_breaks_to_lowest_candidate():
    zero = field_with_bias(-1000.0)
    known = [0.0, 90.0, 180.0, 270.0]
    report = []
    angles = select_views_apgps(zero, SMALL_FIELD, GEOM, known, 5, report=report)
    assert angles == [22.5, 112.5, 202.5, 292.5]
    assert all(s == 0.0 for s in report[0].scores)


def test_select_one_per_gap_inside_interval_and_never_known():
    p = init_field_params(SMALL_FIELD, 4, dtype=np.float64)
    p.weights[-1] *= 100
    rng = np.random.default_rng(2)
    known = sorted(rng.choice(np.arange(0, 360, 3.0), 9, replace=False).tolist())
    angles = select_views_apgps(p, SMALL_FIELD, GEOM, known, 5)
    assert len(angles) == 9
    assert angles == sorted(angles)
    assert not set(angles) & set(known)
    counts = _check_inside(angles, known)
    assert len(counts) == 9
    again = select_views_apgps(p, SMALL_FIELD, GEOM, known, 5)
    assert again == angles


def test_select_ratio_regimes():
    p = init_field_params(SMALL_FIELD, 5, dtype=np.float64)
    p.weights[-1] *= 100
    known = [0.0, 30.0, 100.0, 200.0]
    quarter = select_views_apgps(p, SMALL_FIELD, GEOM, known, 3, n_new_views=1)
    assert len(quarter) == 1
    assert candidate_interval(200.0, 360.0).contains(quarter[0])
    double = select_views_apgps(p, SMALL_FIELD, GEOM, known, 3, n_new_views=8)
    assert len(double) == 8 and len(set(double)) == 8
    assert not set(double) & set(known)
    _check_inside(double, known, per_gap_ok=2)
    with pytest.raises(ValueError):
        select_views_apgps(p, SMALL_FIELD, GEOM, [10.0], 3)


def test_synthesis_matches_training_view_of_fitted_field():
    vol = make_phantom(sphere_specs(32, 0.02), 64, 4.0)
    g = make_circular_geometry(6, 1000, 1500, 64, 64, 4.0, 128.0)
    projs = forward_project(vol, g)
    params = train_field(projs, TrainConfig(steps_per_outer_iter=600, rng_seed=0))
    im = projs.images[2]
    syn = synthesize_projection(params, FieldConfig(), g, im.angle_deg)
    rmse = float(np.sqrt(np.mean((syn.pixels - im.pixels) ** 2)))
    assert rmse < 0.05 * float(np.ptp(im.pixels))
