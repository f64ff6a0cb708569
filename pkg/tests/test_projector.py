from __future__ import annotations

import numpy as np
import pytest

from ctfield.geometry import make_circular_geometry
from ctfield.metrics import psnr
from ctfield.phantom import VolumeGrid, make_phantom, sphere_specs, structured_sphere_specs
from ctfield.projector import (PSEUDO, GeometryMismatchError, ProjectionImage, ProjectionSet, fdk_reconstruct,
                               forward_project, ramp_filter_rows, ramp_kernel, sart_reconstruct)


@pytest.fixture(scope="module")
def sphere():
    return make_phantom(sphere_specs(32, 0.02), 64, 4.0)


def geom(n, extent=128.0):
    return make_circular_geometry(n, 1000, 1500, 64, 64, 4.0, extent)


def test_projection_image_validation():
    with pytest.raises(ValueError):
        ProjectionImage(0.0, np.zeros((2, 2)), weight=0)
    with pytest.raises(ValueError):
        ProjectionImage(0.0, np.full((2, 2), np.nan))
    with pytest.raises(ValueError):
        ProjectionImage(0.0, np.zeros((2, 2)), provenance="fake")


def test_projection_set_sorted_and_unique():
    g = make_circular_geometry(2, 1000, 1500, 2, 2, 1.0, 1.0)
    ps = ProjectionSet(g, [ProjectionImage(90.0, np.zeros((2, 2))), ProjectionImage(10.0, np.ones((2, 2)))])
    assert ps.angles == [10.0, 90.0]
    with pytest.raises(ValueError):
        ProjectionSet(g, [ProjectionImage(5.0, np.zeros((2, 2))), ProjectionImage(5.0, np.zeros((2, 2)))])
    with pytest.raises(GeometryMismatchError):
        ProjectionSet(g, [ProjectionImage(5.0, np.zeros((3, 2)))])


def test_zero_volume_projects_to_zero():
    v = VolumeGrid.zeros(16, 8.0)
    ps = forward_project(v, geom(3))
    assert all(not im.pixels.any() for im in ps.images)
    assert all(im.provenance == "real" and im.weight == 1.0 for im in ps.images)


def test_center_pixel_matches_oracle(sphere):
    g = make_circular_geometry(1, 1000, 1500, 65, 65, 4.0, 128)
    p = forward_project(sphere, g, n_samples=256).images[0].pixels
    assert abs(p[32, 32] - 1.28) / 1.28 < 0.02


def test_opposite_views_mirror(sphere):
    ps = forward_project(sphere, geom(2))
    a, b = ps.images[0].pixels, ps.images[1].pixels
    assert np.max(np.abs(a - b[:, ::-1])) < 0.02 * a.max()


def test_linearity():
    g = geom(3, 64.0)
    rng = np.random.default_rng(0)
    a = VolumeGrid.centered(rng.random((16, 16, 16)).astype(np.float32), 8.0)
    b = VolumeGrid.centered(rng.random((16, 16, 16)).astype(np.float32), 8.0)
    s = VolumeGrid.centered(a.values + b.values, 8.0)
    pa, pb, ps = (forward_project(v, g).stack().astype(np.float64) for v in (a, b, s))
    assert np.allclose(ps, pa + pb, rtol=1e-6, atol=1e-9)


def test_extent_check():
    with pytest.raises(GeometryMismatchError):
        forward_project(VolumeGrid.zeros(64, 4.0), geom(2, extent=64.0))


def test_ramp_kernel_and_filter():
    h = ramp_kernel(4, 1.0)
    assert h[3] == 0.25 and h[2] == h[4] == pytest.approx(-1 / np.pi ** 2) and h[1] == 0
    assert not ramp_filter_rows(np.zeros((3, 8)), 1.0).any()
    # Linear (not circular) convolution, checked against direct evaluation.
    rng = np.random.default_rng(0)
    p = rng.normal(size=(3, 16))
    h = ramp_kernel(16, 0.7)
    direct = np.stack([np.convolve(row, h)[15:31] for row in p]) * 0.7
    assert np.allclose(ramp_filter_rows(p, 0.7), direct, atol=1e-12)


def test_fdk_errors_and_zero():
    g = geom(1)
    ps = ProjectionSet(g, [ProjectionImage(0.0, np.zeros((64, 64)))])
    with pytest.raises(ValueError):
        fdk_reconstruct(ps, 16, 8.0)
    ps2 = ProjectionSet(geom(2), [ProjectionImage(a, np.zeros((64, 64))) for a in (0.0, 180.0)])
    assert not fdk_reconstruct(ps2, 16, 8.0).values.any()


def test_sart_zero_fixed_point_and_validation():
    ps = ProjectionSet(geom(2), [ProjectionImage(a, np.zeros((64, 64))) for a in (0.0, 180.0)])
    assert not sart_reconstruct(ps, 16, 8.0, 3, 0.5).values.any()
    with pytest.raises(ValueError):
        sart_reconstruct(ps, 16, 8.0, 0, 0.5)
    with pytest.raises(ValueError):
        sart_reconstruct(ps, 16, 8.0, 1, 1.5)


def test_sart_residual_decreases(sphere):
    g = geom(20)
    ps = forward_project(sphere, g)
    b = ps.stack().astype(np.float64)
    res = []

    def cb(it, vol):
        res.append(np.linalg.norm(forward_project(vol, g).stack() - b))

    vol = sart_reconstruct(ps, 64, 4.0, 20, 0.5, callback=cb)
    assert all(y <= x * (1 + 1e-9) for x, y in zip(res[:5], res[1:5]))
    assert res[19] < res[4]
    assert np.all(np.isfinite(vol.values)) and vol.values.min() >= 0


def test_fdk_dense_and_sparse(sphere):
    dense = fdk_reconstruct(forward_project(sphere, geom(120)), 64, 4.0)
    sparse = fdk_reconstruct(forward_project(sphere, geom(20)), 64, 4.0)
    assert np.all(np.isfinite(dense.values))
    assert abs(dense.values[32, 32, 32] - 0.02) < 0.002
    assert psnr(dense, sphere) > 20.0
    assert psnr(sparse, sphere) < psnr(dense, sphere)


def test_outputs_finite_for_pseudo_noise():
    g = geom(4, 64.0)
    rng = np.random.default_rng(3)
    ps = ProjectionSet(g, [ProjectionImage(a, rng.normal(size=(64, 64)), PSEUDO, 0.5) for a in g.angles_deg])
    assert np.all(np.isfinite(fdk_reconstruct(ps, 16, 8.0).values))
    assert np.all(np.isfinite(sart_reconstruct(ps, 16, 8.0, 2, 1.0).values))
