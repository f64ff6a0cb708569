"""Volume quality metrics: PSNR and windowed 3D SSIM."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .phantom import VolumeGrid


class VolumeTooSmallError(ValueError):
    """A volume axis is shorter than the SSIM window."""


def _values(v) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, VolumeGrid) else v, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x, y = _values(a), _values(b)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(a, b, data_range: Optional[float] = None) -> float:
    """``10 log10(range^2 / MSE)``; ``inf`` for identical inputs.

    ``data_range`` defaults to the maximum of ``b`` (pass the ground truth second).
    """
    x, y = _pair(a, b)
    rng = float(np.max(y)) if data_range is None else float(data_range)
    if not rng > 0:
        raise ValueError(f"data_range must be > 0, got {rng}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(rng * rng / mse)


def ssim(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: Optional[float] = None) -> float:
    """Mean SSIM over all fully contained ``window^3`` cubes with uniform weights.

    Local statistics use population (1/n) moments.
    """
    x, y = _pair(a, b)
    if x.ndim != 3 or min(x.shape) < window:
        raise VolumeTooSmallError(f"volume {x.shape} smaller than window {window}")
    rng = float(np.max(y)) if data_range is None else float(data_range)
    if not rng > 0:
        raise ValueError(f"data_range must be > 0, got {rng}")
    if np.array_equal(x, y):
        return 1.0
    c1 = (k1 * rng) ** 2
    c2 = (k2 * rng) ** 2
    f = lambda z: uniform_filter(z, size=window, mode="constant")
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    h = window // 2
    lo, hi = h, [n - (window - 1 - h) for n in x.shape]
    inner = s[lo:hi[0], lo:hi[1], lo:hi[2]]
    return float(np.clip(np.mean(inner), -1.0, 1.0))


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    data_range: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")

    def record(self) -> str:
        return format_record(self.psnr_db, self.ssim)

    def to_dict(self) -> dict:
        return {"psnr_db": None if math.isinf(self.psnr_db) else self.psnr_db,
                "psnr_inf": math.isinf(self.psnr_db), "ssim": self.ssim,
                "data_range": self.data_range, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        p = math.inf if d.get("psnr_inf") else float(d["psnr_db"])
        return cls(p, float(d["ssim"]), float(d["data_range"]), tuple(d["dims"]))


def evaluate(recon, truth, data_range: Optional[float] = None) -> MetricReport:
    y = _values(truth)
    rng = float(np.max(y)) if data_range is None else float(data_range)
    dims = truth.dims if isinstance(truth, VolumeGrid) else tuple(reversed(y.shape))
    return MetricReport(psnr(recon, truth, rng), ssim(recon, truth, data_range=rng), rng, tuple(dims))


_RECORD = re.compile(r"^\s*(inf|[-+]?\d+(?:\.\d+)?)\s*/\s*([-+]?\d+(?:\.\d+)?)\s*$")


def format_record(psnr_db: float, ssim_value: float) -> str:
    """Table-style ``PSNR/SSIM`` string, e.g. ``37.21/0.9780``."""
    p = "inf" if math.isinf(psnr_db) else f"{psnr_db:.2f}"
    return f"{p}/{ssim_value:.4f}"


def parse_record(text: str) -> tuple[float, float]:
    m = _RECORD.match(text)
    if not m:
        raise ValueError(f"not a PSNR/SSIM record: {text!r}")
    p = math.inf if m.group(1) == "inf" else float(m.group(1))
    return p, float(m.group(2))
