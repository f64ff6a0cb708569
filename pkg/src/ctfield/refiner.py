"""Residual-diffusion refinement of synthesized projections.

The forward process blends a clean image ``P_0`` toward a degraded condition
``P_in`` while adding noise::

    P_t = P_0 + abar_t * (P_in - P_0) + bbar_t * eps

so that ``P_T = P_in + eps``.  A small convolutional network with a shared
encoder-decoder and two 1x1 heads predicts the residual ``P_in - P_0`` and
the noise; the reverse sampler subtracts both in decrements of the cumulative
schedules.  A per-image affine range transform (DRAT) maps projections into
the network's [0, 1] working range and back exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from scipy.ndimage import gaussian_filter

from .field import DivergenceError, FieldConfig, FieldParams, TrainConfig, render_projection, train_field
from .geometry import ScanGeometry
from .projector import PSEUDO, ProjectionImage, ProjectionSet, project_view
from .phantom import VolumeGrid

log = logging.getLogger(__name__)

REUSE_STRATEGIES = ("none", "minmax-roundtrip", "drat")


class ResolutionMismatchError(ValueError):
    """Image shape differs from the one the denoiser was built for."""


# -- schedule --------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step and cumulative coefficients, indexed 0..T (index 0 is the clean state)."""

    T: int
    alpha: np.ndarray
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray


def make_schedule(T: int, power: float = 1.0) -> DiffusionSchedule:
    """Linear residual schedule ``abar_t = t/T`` and noise std ``bbar_t = (t/T)^power``.

    Per-step noise scales combine in variance: ``bbar_t^2 = sum_{s<=t} beta_s^2``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    abar = t / T
    bbar = (t / T) ** power
    abar[T] = 1.0
    bbar[T] = 1.0
    alpha = np.concatenate([[0.0], np.diff(abar)])
    beta = np.concatenate([[0.0], np.sqrt(np.maximum(np.diff(bbar ** 2), 0.0))])
    return DiffusionSchedule(int(T), alpha, beta, abar, bbar)


def diffuse_forward(p0: np.ndarray, p_in: np.ndarray, t: int, schedule: DiffusionSchedule,
                    eps: np.ndarray) -> np.ndarray:
    p0, p_in, eps = np.asarray(p0), np.asarray(p_in), np.asarray(eps)
    if not (p0.shape == p_in.shape == eps.shape):
        raise ValueError(f"shape mismatch: {p0.shape}, {p_in.shape}, {eps.shape}")
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t must lie in [0, {schedule.T}], got {t}")
    return p0 + schedule.alpha_bar[t] * (p_in - p0) + schedule.beta_bar[t] * eps


# A denoiser maps (P_t, t, P_in) to (predicted residual, predicted noise).
DenoiserFn = Callable[[np.ndarray, int, np.ndarray], tuple[np.ndarray, np.ndarray]]


def reverse_step(p_t: np.ndarray, t: int, p_in: np.ndarray, denoiser: DenoiserFn,
                 schedule: DiffusionSchedule) -> np.ndarray:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    res, eps = denoiser(p_t, t, p_in)
    da = schedule.alpha_bar[t] - schedule.alpha_bar[t - 1]
    db = schedule.beta_bar[t] - schedule.beta_bar[t - 1]
    return p_t - da * res - db * eps


def reverse_sample(p_start: np.ndarray, p_in: np.ndarray, denoiser: DenoiserFn,
                   schedule: DiffusionSchedule, t_start: Optional[int] = None) -> np.ndarray:
    """Run reverse steps from ``t_start`` (default T) down to 0."""
    x = np.asarray(p_start)
    for t in range(schedule.T if t_start is None else t_start, 0, -1):
        x = reverse_step(x, t, p_in, denoiser, schedule)
    return x


class OracleDenoiser:
    """Returns the true residual and noise; used to check the sampler algebra."""

    def __init__(self, p0: np.ndarray, p_in: np.ndarray, eps: np.ndarray):
        self.res = np.asarray(p_in) - np.asarray(p0)
        self.eps = np.asarray(eps)

    def __call__(self, p_t, t, p_in):
        return self.res, self.eps


def zero_denoiser(p_t, t, p_in):
    z = np.zeros_like(p_t)
    return z, z


# -- range transform ---------------------------------------------------------

@dataclass(frozen=True)
class DratParams:
    """Affine map ``x -> gamma * x + b`` with ``|gamma| >= epsilon_floor``."""

    gamma: float
    b: float
    epsilon_floor: float = 1e-6

    def __post_init__(self):
        if not self.epsilon_floor > 0:
            raise ValueError("epsilon_floor must be > 0")
        if abs(self.gamma) < self.epsilon_floor:
            raise ValueError(f"|gamma| = {abs(self.gamma)} below floor {self.epsilon_floor}")


def estimate_drat(p: np.ndarray, target_range: tuple[float, float] = (0.0, 1.0),
                  epsilon_floor: float = 1e-6) -> DratParams:
    """Affine parameters sending [min p, max p] onto ``target_range``.

    The map is anchored at the centers of both ranges, so a constant image
    (gamma clamped to the floor) lands on the target midpoint.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("DRAT input must be finite")
    lo, hi = (float(x) for x in target_range)
    pmin, pmax = float(p.min()), float(p.max())
    span = pmax - pmin
    gamma = (hi - lo) / span if span > 0 else epsilon_floor
    gamma = max(gamma, epsilon_floor)
    b = 0.5 * (lo + hi) - gamma * 0.5 * (pmin + pmax)
    return DratParams(gamma, b, epsilon_floor)


def drat_apply(p: np.ndarray, drat: DratParams) -> np.ndarray:
    return drat.gamma * np.asarray(p, dtype=np.float64) + drat.b


def drat_invert(p_scaled: np.ndarray, drat: DratParams) -> np.ndarray:
    return (np.asarray(p_scaled, dtype=np.float64) - drat.b) / drat.gamma


# -- network -----------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    time_dim: int = 64
    image_shape: tuple[int, int] = (64, 64)
    T: int = 50
    noise_power: float = 1.0
    consistent_noise: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        if "image_shape" in d:
            d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    """Sinusoidal embedding of the step index scaled to [0, 1000]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float() * (1000.0 / T))[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.act(self.conv1(x))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.act(self.conv2(h))
        return h + self.skip(x)


class DualHeadUNet(nn.Module):
    """Two-level encoder-decoder on cat(P_t, P_in, P_t - P_in) with residual and noise heads.

    With ``consistent_noise`` the noise head is anchored to the forward
    process: since ``P_t - P_in = (abar_t - 1) res + bbar_t eps``, the noise
    implied by the residual prediction is
    ``(P_t - P_in + (1 - abar_t) res_hat) / bbar_t``, and the noise head adds a
    learned correction to it.  The noise loss then also trains the residual
    branch, weighted by ``((1 - abar_t) / bbar_t)^2``, and its optimum is a
    zero correction.  Keeping the branches in agreement makes their errors
    cancel over the deterministic reverse trajectory instead of accumulating.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        c, td = config.base_channels, config.time_dim
        self.T = config.T
        self.consistent_noise = config.consistent_noise
        sched = make_schedule(config.T, config.noise_power)
        self.register_buffer("abar", torch.tensor(sched.alpha_bar, dtype=torch.float32), persistent=False)
        self.register_buffer("bbar", torch.tensor(sched.beta_bar, dtype=torch.float32), persistent=False)
        self.time_dim = td
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.enc1 = _Block(3, c, td)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = _Block(2 * c, 2 * c, td)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.mid = _Block(4 * c, 4 * c, td)
        self.up2 = nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2)
        self.dec2 = _Block(4 * c, 2 * c, td)
        self.up1 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.dec1 = _Block(2 * c, c, td)
        self.head_res = nn.Conv2d(c, 1, 1)
        self.head_eps = nn.Conv2d(c, 1, 1)

    def forward(self, p_t: torch.Tensor, t: torch.Tensor, p_in: torch.Tensor):
        x = torch.cat([p_t, p_in, p_t - p_in], dim=1)
        emb = self.time_mlp(timestep_embedding(t, self.time_dim, self.T))
        h1 = self.enc1(x, emb)
        h2 = self.enc2(self.down1(h1), emb)
        m = self.mid(self.down2(h2), emb)
        d2 = self.dec2(torch.cat([self.up2(m), h2], dim=1), emb)
        d1 = self.dec1(torch.cat([self.up1(d2), h1], dim=1), emb)
        res = self.head_res(d1)
        eps = self.head_eps(d1)
        if self.consistent_noise:
            a = self.abar[t][:, None, None, None]
            b = self.bbar[t][:, None, None, None]
            eps = eps + (p_t - p_in + (1.0 - a) * res) / b
        return res, eps


@dataclass
class DenoiserParams:
    """Network configuration plus named float32 tensors in module order."""

    config: DenoiserConfig
    tensors: dict[str, np.ndarray]

    def build(self) -> DualHeadUNet:
        net = DualHeadUNet(self.config)
        net.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.tensors.items()})
        net.eval()
        return net

    @classmethod
    def from_module(cls, config: DenoiserConfig, net: nn.Module) -> "DenoiserParams":
        return cls(config, {k: v.detach().cpu().numpy().astype(np.float32).copy()
                            for k, v in net.state_dict().items()})

    def equals(self, other: "DenoiserParams") -> bool:
        return (self.config == other.config and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def init_denoiser(config: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> DenoiserParams:
    g = torch.random.fork_rng()
    with g:
        torch.manual_seed(seed)
        net = DualHeadUNet(config)
    return DenoiserParams.from_module(config, net)


class Denoiser:
    """Callable wrapper: numpy (…, H, W) arrays in, (residual, noise) predictions out."""

    def __init__(self, params: DenoiserParams):
        self.params = params
        self.net = params.build()

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.params.config.image_shape)

    def __call__(self, p_t: np.ndarray, t: int, p_in: np.ndarray):
        p_t = np.asarray(p_t)
        single = p_t.ndim == 2
        a = torch.from_numpy(np.asarray(p_t, dtype=np.float32).reshape(-1, 1, *p_t.shape[-2:]))
        c = torch.from_numpy(np.asarray(p_in, dtype=np.float32).reshape(-1, 1, *p_t.shape[-2:]))
        tt = torch.full((a.shape[0],), int(t), dtype=torch.long)
        with torch.no_grad():
            r, e = self.net(a, tt, c)
        r = r.numpy().astype(np.float64).reshape(p_t.shape)
        e = e.numpy().astype(np.float64).reshape(p_t.shape)
        return r, e


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    crop: int = 32
    lr: float = 2e-3
    lr_final_fraction: float = 0.1
    lambda_res: float = 1.0
    lambda_eps: float = 1.0
    seed: int = 0
    network: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if not (self.lambda_res > 0 and self.lambda_eps > 0):
            raise ValueError("lambda_res and lambda_eps must be > 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserTrainConfig":
        d = dict(d)
        net = DenoiserConfig.from_dict(d.pop("network")) if "network" in d else DenoiserConfig()
        return cls(network=net, **d)


def _stack_pairs(pairs):
    clean = np.stack([np.asarray(c, dtype=np.float32) for c, _ in pairs])
    degraded = np.stack([np.asarray(d, dtype=np.float32) for _, d in pairs])
    if clean.shape != degraded.shape:
        raise ValueError("clean and degraded images must share shapes")
    return clean, degraded


def denoiser_objective(params: DenoiserParams, pairs, schedule: DiffusionSchedule, seed: int = 0,
                       lambda_res: float = 1.0, lambda_eps: float = 1.0, draws: int = 4) -> float:
    """Mean training objective over every pair at ``draws`` random (t, eps) each."""
    net = params.build()
    clean, degraded = _stack_pairs(pairs)
    rng = np.random.default_rng(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(draws):
            t = rng.integers(1, schedule.T + 1, size=len(clean))
            eps = rng.standard_normal(clean.shape).astype(np.float32)
            loss = _objective(net, clean, degraded, t, eps, schedule, lambda_res, lambda_eps)
            total += float(loss)
    return total / draws


def _objective(net, clean, degraded, t, eps, schedule, lambda_res, lambda_eps):
    abar = torch.from_numpy(schedule.alpha_bar[t].astype(np.float32))[:, None, None, None]
    bbar = torch.from_numpy(schedule.beta_bar[t].astype(np.float32))[:, None, None, None]
    p0 = torch.from_numpy(clean)[:, None]
    pin = torch.from_numpy(degraded)[:, None]
    e = torch.from_numpy(eps)[:, None]
    res = pin - p0
    pt = p0 + abar * res + bbar * e
    r_hat, e_hat = net(pt, torch.from_numpy(t.astype(np.int64)), pin)
    return lambda_res * torch.mean((res - r_hat) ** 2) + lambda_eps * torch.mean((e - e_hat) ** 2)


def train_denoiser(pairs: Sequence[tuple[np.ndarray, np.ndarray]], schedule: DiffusionSchedule,
                   config: DenoiserTrainConfig = DenoiserTrainConfig(),
                   init: Optional[DenoiserParams] = None, loss_log: Optional[list] = None) -> DenoiserParams:
    """Fit the dual-head network on (clean, degraded) pairs.

    Each step draws a batch of pairs, random crops with horizontal flips, a
    step index ``t ~ U{1..T}`` and standard normal noise, and minimizes
    ``lambda_res * |res - res_hat|^2 + lambda_eps * |eps - eps_hat|^2``.
    Deterministic given ``config.seed`` (single-threaded CPU).
    """
    if len(pairs) == 0:
        raise ValueError("train_denoiser needs at least one pair")
    if schedule.T != config.network.T:
        raise ValueError(f"schedule T={schedule.T} differs from network T={config.network.T}")
    clean, degraded = _stack_pairs(pairs)
    if tuple(clean.shape[1:]) != tuple(config.network.image_shape):
        raise ResolutionMismatchError(
            f"pairs are {clean.shape[1:]}, network expects {config.network.image_shape}")
    H, W = clean.shape[1:]
    crop = min(config.crop, H, W)
    params = init if init is not None else init_denoiser(config.network, config.seed)
    net = params.build()
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x445250])
    n = config.steps
    B = config.batch_size
    for step in range(n):
        for g in opt.param_groups:
            g["lr"] = config.lr * (1.0 - (1.0 - config.lr_final_fraction) * step / max(n - 1, 1))
        idx = rng.integers(0, len(clean), size=B)
        ys = rng.integers(0, H - crop + 1, size=B)
        xs = rng.integers(0, W - crop + 1, size=B)
        flip = rng.random(B) < 0.5
        c = np.empty((B, crop, crop), np.float32)
        d = np.empty((B, crop, crop), np.float32)
        for b in range(B):
            sl = (idx[b], slice(ys[b], ys[b] + crop), slice(xs[b], xs[b] + crop))
            c[b], d[b] = clean[sl], degraded[sl]
            if flip[b]:
                c[b], d[b] = c[b][:, ::-1], d[b][:, ::-1]
        t = rng.integers(1, schedule.T + 1, size=B)
        eps = rng.standard_normal((B, crop, crop)).astype(np.float32)
        loss = _objective(net, c, d, t, eps, schedule, config.lambda_res, config.lambda_eps)
        if not torch.isfinite(loss):
            raise DivergenceError(f"denoiser loss became {float(loss)} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if loss_log is not None:
            loss_log.append(loss.item())
    net.eval()
    return DenoiserParams.from_module(config.network, net)


# -- refinement --------------------------------------------------------------

def _check_shape(images: np.ndarray, denoiser) -> None:
    shape = getattr(denoiser, "image_shape", None)
    if shape is not None and tuple(images.shape[-2:]) != tuple(shape):
        raise ResolutionMismatchError(f"image shape {images.shape[-2:]} differs from denoiser {tuple(shape)}")


def refine_scaled(p_in: np.ndarray, denoiser: DenoiserFn, schedule: DiffusionSchedule,
                  eps: np.ndarray) -> np.ndarray:
    """Reverse diffusion from ``P_T = P_in + eps`` in the working range."""
    return reverse_sample(p_in + eps, p_in, denoiser, schedule)


def _minmax(p: np.ndarray) -> tuple[float, float]:
    return float(np.min(p)), float(np.max(p))


def refine_images(images: Sequence[ProjectionImage], denoiser: DenoiserFn, schedule: DiffusionSchedule,
                  seeds: Sequence[int], strategy: str = "drat", weight: Optional[float] = None,
                  noise_scale: float = 1.0) -> list[ProjectionImage]:
    """Refine several projections together (one batched network call per step).

    ``strategy`` selects how pixel values reach and leave the network range:

    * ``drat``: exact per-image affine map to [0, 1] and its inverse.
    * ``minmax-roundtrip``: the same normalization on the way in, but the
      output is restored by stretching the refined image's own min/max onto
      the input's min/max, which does not invert the forward map.
    * ``none``: images pass through unrefined.
    """
    if strategy not in REUSE_STRATEGIES:
        raise ValueError(f"unknown reuse strategy {strategy!r}")
    if len(seeds) != len(images):
        raise ValueError("one seed per image is required")
    out_w = [im.weight if weight is None else weight for im in images]
    if not images:
        return []
    if strategy == "none":
        return [ProjectionImage(im.angle_deg, im.pixels.copy(), PSEUDO, w) for im, w in zip(images, out_w)]
    raw = np.stack([im.pixels.astype(np.float64) for im in images])
    _check_shape(raw, denoiser)
    drats = [estimate_drat(p) for p in raw]
    scaled = np.stack([drat_apply(p, d) for p, d in zip(raw, drats)])
    eps = np.stack([noise_scale * np.random.default_rng(s).standard_normal(raw.shape[1:]) for s in seeds])
    refined = refine_scaled(scaled, denoiser, schedule, eps)
    out = []
    for k, (im, w) in enumerate(zip(images, out_w)):
        if strategy == "drat":
            pix = drat_invert(refined[k], drats[k])
        else:
            lo, hi = _minmax(raw[k])
            rlo, rhi = _minmax(refined[k])
            span = rhi - rlo
            unit = (refined[k] - rlo) / span if span > 0 else np.full_like(refined[k], 0.5)
            pix = lo + unit * (hi - lo)
        pix = np.nan_to_num(pix, nan=0.0, posinf=0.0, neginf=0.0)
        out.append(ProjectionImage(im.angle_deg, pix, PSEUDO, w))
    return out


def refine_projection(p_synthetic: ProjectionImage, denoiser: DenoiserFn, schedule: DiffusionSchedule,
                      seed: int = 0, strategy: str = "drat", noise_scale: float = 1.0) -> ProjectionImage:
    return refine_images([p_synthetic], denoiser, schedule, [seed], strategy, noise_scale=noise_scale)[0]


# -- training corpus -----------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    """How (clean, degraded) training pairs are produced from one phantom.

    Clean images are ground-truth projections at ``n_clean_angles`` angles
    offset by half a step from zero.  Degraded partners come from fields
    trained for ``field_steps`` steps on each sparse subset (given as
    ``(n_views, offset_deg)``), plus blur/noise perturbations of the clean
    images.
    """

    n_clean_angles: int = 96
    clean_offset_fraction: float = 0.5
    subsets: tuple[tuple[int, float], ...] = ((20, 4.5), (20, 13.5), (30, 6.0), (40, 4.5))
    field_steps: int = 1500
    blur_sigma_px: tuple[float, float] = (0.5, 1.5)
    noise_fraction: tuple[float, float] = (0.005, 0.02)
    n_parametric: int = 96
    seed: int = 0
    samples_per_ray: int = 64

    def clean_angles(self) -> list[float]:
        step = 360.0 / self.n_clean_angles
        return [(k + self.clean_offset_fraction) * step for k in range(self.n_clean_angles)]


def parametric_degradation(p: np.ndarray, rng: np.random.Generator, blur_sigma_px=(0.5, 1.5),
                           noise_fraction=(0.005, 0.02)) -> np.ndarray:
    sigma = rng.uniform(*blur_sigma_px)
    frac = rng.uniform(*noise_fraction)
    rng_ = float(np.ptp(p)) or 1.0
    return gaussian_filter(p, sigma, mode="nearest") + rng.standard_normal(p.shape) * frac * rng_


def field_degraded_pairs(volume: VolumeGrid, geom: ScanGeometry, n_views: int, offset_deg: float,
                         angles: Sequence[float], clean: Sequence[np.ndarray], train: TrainConfig,
                         samples_per_ray: int = 64):
    """Pairs of clean images and renders of a field fit on an ``n_views`` subset."""
    sub = [(offset_deg + k * 360.0 / n_views) % 360.0 for k in range(n_views)]
    g = geom.with_angles(sub)
    projs = ProjectionSet(g, [ProjectionImage(a, project_view(volume, g, a)) for a in g.angles_deg])
    params = train_field(projs, train)
    return [(c, render_projection(params, train.field, geom, a, samples_per_ray)) for a, c in zip(angles, clean)]


def build_corpus(volume: VolumeGrid, geom: ScanGeometry, config: CorpusConfig = CorpusConfig(),
                 train: Optional[TrainConfig] = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Raw line-integral (clean, degraded) pairs; see :class:`CorpusConfig`."""
    train = train or TrainConfig()
    train = replace(train, steps_per_outer_iter=config.field_steps)
    angles = config.clean_angles()
    clean = [project_view(volume, geom, a) for a in angles]
    pairs = []
    for i, (n, off) in enumerate(config.subsets):
        t = replace(train, rng_seed=config.seed * 1000 + i)
        pairs += field_degraded_pairs(volume, geom, n, off, angles, clean, t, config.samples_per_ray)
    rng = np.random.default_rng([config.seed, 0x434F52])
    for j in range(config.n_parametric):
        c = clean[j % len(clean)]
        pairs.append((c, parametric_degradation(c, rng, config.blur_sigma_px, config.noise_fraction)))
    return pairs


def normalize_pairs(pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    """Map each pair into the working range with DRAT estimated on its degraded image."""
    out = []
    for c, d in pairs:
        dr = estimate_drat(d)
        out.append((drat_apply(c, dr).astype(np.float32), drat_apply(d, dr).astype(np.float32)))
    return out
