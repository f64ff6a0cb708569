from __future__ import annotations

import numpy as np
import pytest
import torch

from ctfield.projector import PSEUDO, ProjectionImage
from ctfield.refiner import (DenoiserConfig, DenoiserParams, DenoiserTrainConfig, Denoiser, DratParams,
                             OracleDenoiser, ResolutionMismatchError, denoiser_objective, diffuse_forward,
                             drat_apply, drat_invert, estimate_drat, init_denoiser, make_schedule,
                             normalize_pairs, parametric_degradation, refine_images, refine_projection,
                             reverse_sample, reverse_step, train_denoiser, zero_denoiser)

SMALL_NET = DenoiserConfig(base_channels=8, time_dim=16, image_shape=(16, 16), T=10)


def test_schedule_examples_and_invariants():
    s = make_schedule(10)
    assert s.alpha_bar[5] == 0.5
    assert s.beta_bar[10] == 1.0 and s.alpha_bar[10] == 1.0
    assert s.alpha_bar[0] == 0.0 and s.beta_bar[0] == 0.0
    assert np.all(np.diff(s.beta_bar) >= 0) and np.all(np.diff(s.alpha_bar) >= 0)
    for T in (1, 7, 50, 1000):
        s = make_schedule(T)
        assert np.sum(np.diff(s.alpha_bar)) == pytest.approx(1.0, abs=1e-12)
        assert np.sum(np.diff(s.beta_bar)) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(np.cumsum(s.alpha), s.alpha_bar, atol=1e-12)
        np.testing.assert_allclose(np.sqrt(np.cumsum(s.beta ** 2)), s.beta_bar, atol=1e-12)
    with pytest.raises(ValueError):
        make_schedule(0)


def test_diffuse_forward_examples():
    rng = np.random.default_rng(0)
    s = make_schedule(10)
    p0, pin, eps = rng.normal(size=(3, 8, 8))
    assert np.array_equal(diffuse_forward(p0, pin, 0, s, eps), p0)
    np.testing.assert_allclose(diffuse_forward(p0, pin, 10, s, eps), pin + eps, atol=1e-15)
    np.testing.assert_allclose(diffuse_forward(p0, pin, 5, s, np.zeros_like(eps)), p0 + 0.5 * (pin - p0),
                               atol=1e-15)
    np.testing.assert_allclose(s.alpha_bar[10] * (pin - p0) + p0, pin, atol=1e-15)
    with pytest.raises(ValueError):
        diffuse_forward(p0, pin[:4], 3, s, eps)
    with pytest.raises(ValueError):
        diffuse_forward(p0, pin, 11, s, eps)


def test_reverse_step_zero_and_single_step():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(5, 5))
    s = make_schedule(10)
    assert np.array_equal(reverse_step(p, 3, p, zero_denoiser, s), p)
    s1 = make_schedule(1)
    res, eps = rng.normal(size=(2, 5, 5))
    out = reverse_step(p, 1, p, lambda *_: (res, eps), s1)
    np.testing.assert_allclose(out, p - res - eps, atol=1e-15)
    with pytest.raises(ValueError):
        reverse_step(p, 0, p, zero_denoiser, s)


def test_oracle_reverse_recovers_clean_image_from_any_t():
    rng = np.random.default_rng(2)
    s = make_schedule(50)
    worst = 0.0
    for _ in range(100):
        p0 = rng.normal(size=(32, 32))
        pin = p0 + rng.normal(size=(32, 32)) * rng.uniform(0.01, 1)
        eps = rng.normal(size=(32, 32))
        t = int(rng.integers(1, 51))
        pt = diffuse_forward(p0, pin, t, s, eps)
        out = reverse_sample(pt, pin, OracleDenoiser(p0, pin, eps), s, t_start=t)
        worst = max(worst, float(np.max(np.abs(out - p0))))
    assert worst < 1e-5


def test_drat_examples():
    p = np.array([[2.0, 3.0], [5.0, 6.0]])
    d = estimate_drat(p)
    assert d.gamma == 0.25 and d.b == -0.5
    np.testing.assert_allclose(drat_apply(p, d).min(), 0.0, atol=1e-15)
    np.testing.assert_allclose(drat_apply(p, d).max(), 1.0, atol=1e-15)
    unit = np.array([[0.0, 0.3], [0.7, 1.0]])
    d = estimate_drat(unit)
    assert d.gamma == 1.0 and d.b == 0.0
    ident = DratParams(1.0, 0.0)
    assert np.array_equal(drat_apply(unit, ident), unit)
    const = np.full((4, 4), 3.7)
    d = estimate_drat(const)
    assert d.gamma == 1e-6
    np.testing.assert_allclose(drat_apply(const, d), 0.5, atol=1e-12)
    np.testing.assert_allclose(drat_invert(drat_apply(const, d), d), const, atol=1e-6)
    with pytest.raises(ValueError):
        DratParams(1e-9, 0.0)
    with pytest.raises(ValueError):
        DratParams(1.0, 0.0, epsilon_floor=0.0)
    with pytest.raises(ValueError):
        estimate_drat(np.array([1.0, np.nan]))


def test_drat_round_trips():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(1000):
        if i % 10 == 0:
            x = np.full((8, 8), rng.uniform(-5, 5))
        else:
            x = rng.normal(size=(8, 8)) * rng.uniform(1e-3, 10) + rng.uniform(-5, 5)
        d = estimate_drat(x)
        y = rng.uniform(0, 1, (8, 8))
        worst = max(worst, np.max(np.abs(drat_invert(drat_apply(x, d), d) - x)),
                    np.max(np.abs(drat_apply(drat_invert(y, d), d) - y)))
    assert worst < 1e-6


def test_refine_with_oracle_recovers_clean_target():
    rng = np.random.default_rng(4)
    s = make_schedule(50)
    for seed in range(5):
        clean = rng.uniform(0, 3, (16, 16))
        synthetic = clean + rng.normal(size=(16, 16)) * 0.1
        d = estimate_drat(synthetic)
        eps = np.random.default_rng(seed).standard_normal((16, 16))
        oracle = OracleDenoiser(drat_apply(clean, d), drat_apply(synthetic, d), eps)
        out = refine_projection(ProjectionImage(10.0, synthetic, PSEUDO, 0.5), oracle, s, seed=seed)
        assert out.provenance == PSEUDO
        assert np.max(np.abs(out.pixels - clean)) < 1e-4


def test_refine_zero_denoiser_paths():
    rng = np.random.default_rng(5)
    s = make_schedule(10)
    im = ProjectionImage(3.0, rng.uniform(0, 2, (16, 16)), PSEUDO, 0.5)
    out = refine_projection(im, zero_denoiser, s, seed=1, noise_scale=0.0)
    np.testing.assert_allclose(out.pixels, im.pixels, atol=1e-12)
    out = refine_projection(im, zero_denoiser, s, seed=1)
    d = estimate_drat(im.pixels)
    eps = np.random.default_rng(1).standard_normal((16, 16))
    np.testing.assert_allclose(out.pixels, im.pixels + eps / d.gamma, atol=1e-9)


def test_refine_strategies_and_errors():
    rng = np.random.default_rng(6)
    s = make_schedule(10)
    ims = [ProjectionImage(float(a), rng.uniform(0, 2, (16, 16)), PSEUDO, 0.5) for a in (1, 2)]
    none = refine_images(ims, zero_denoiser, s, [0, 1], "none")
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(none, ims))
    mm = refine_images(ims, zero_denoiser, s, [0, 1], "minmax-roundtrip")
    for a, b in zip(mm, ims):
        assert a.pixels.min() == pytest.approx(b.pixels.min()) and a.pixels.max() == pytest.approx(b.pixels.max())
        assert np.all(np.isfinite(a.pixels))
    with pytest.raises(ValueError):
        refine_images(ims, zero_denoiser, s, [0, 1], "bogus")
    with pytest.raises(ValueError):
        refine_images(ims, zero_denoiser, s, [0], "drat")
    den = Denoiser(init_denoiser(SMALL_NET, 0))
    with pytest.raises(ResolutionMismatchError):
        refine_images([ProjectionImage(0.0, np.ones((8, 8)))], den, s, [0])


def test_refine_deterministic_and_finite():
    rng = np.random.default_rng(7)
    s = make_schedule(10)
    den = Denoiser(init_denoiser(SMALL_NET, 1))
    ims = [ProjectionImage(float(a), rng.uniform(0, 2, (16, 16)), PSEUDO, 0.5) for a in range(3)]
    a = refine_images(ims, den, s, [4, 5, 6])
    b = refine_images(ims, den, s, [4, 5, 6])
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    assert all(np.all(np.isfinite(x.pixels)) and x.pixels.shape == (16, 16) for x in a)


def test_network_heads_match_input_resolution():
    net = init_denoiser(SMALL_NET, 0).build()
    x = torch.zeros(2, 1, 16, 16)
    r, e = net(x, torch.tensor([1, 10]), x)
    assert r.shape == e.shape == x.shape


def _toy_pairs(n, rng, identical=False):
    pairs = []
    for _ in range(n):
        yy, xx = np.mgrid[:16, :16]
        c = np.exp(-((xx - rng.uniform(4, 12)) ** 2 + (yy - rng.uniform(4, 12)) ** 2) / rng.uniform(6, 20))
        d = c if identical else parametric_degradation(c, rng)
        pairs.append((c, d))
    return normalize_pairs(pairs)


def test_train_denoiser_determinism_and_progress():
    s = make_schedule(10)
    rng = np.random.default_rng(8)
    pairs = _toy_pairs(24, rng)
    val = _toy_pairs(8, rng)
    cfg = DenoiserTrainConfig(steps=150, batch_size=8, crop=16, lr=2e-3, seed=3, network=SMALL_NET)
    a = train_denoiser(pairs, s, cfg)
    b = train_denoiser(pairs, s, cfg)
    assert a.equals(b)
    before = denoiser_objective(init_denoiser(SMALL_NET, 3), val, s)
    after = denoiser_objective(a, val, s)
    assert after < 0.5 * before


def test_train_denoiser_zero_residual_pairs():
    s = make_schedule(10)
    rng = np.random.default_rng(9)
    pairs = _toy_pairs(16, rng, identical=True)
    cfg = DenoiserTrainConfig(steps=200, batch_size=8, crop=16, seed=0, network=SMALL_NET)
    den = Denoiser(train_denoiser(pairs, s, cfg))
    held = _toy_pairs(4, rng, identical=True)
    eps = rng.standard_normal((16, 16))
    vals = []
    for c, _ in held:
        for t in (1, 5, 10):
            res, _ = den(diffuse_forward(c, c, t, s, eps), t, c)
            vals.append(np.mean(np.abs(res)))
    assert np.mean(vals) < 0.05


def test_train_denoiser_errors():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        train_denoiser([], s, DenoiserTrainConfig(network=SMALL_NET))
    with pytest.raises(ResolutionMismatchError):
        train_denoiser([(np.zeros((8, 8)), np.zeros((8, 8)))], s, DenoiserTrainConfig(network=SMALL_NET))
    with pytest.raises(ValueError):
        train_denoiser([(np.zeros((16, 16)), np.zeros((16, 16)))], make_schedule(5),
                       DenoiserTrainConfig(network=SMALL_NET))


def test_config_round_trip():
    cfg = DenoiserTrainConfig(steps=5, network=SMALL_NET)
    assert DenoiserTrainConfig.from_dict(cfg.to_dict()) == cfg
    p = init_denoiser(SMALL_NET, 2)
    assert DenoiserParams(p.config, dict(p.tensors)).equals(p)
    assert not init_denoiser(SMALL_NET, 3).equals(p)
