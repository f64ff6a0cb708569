"""Novel-view projection synthesis and angle-prior guided view selection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .field import FieldConfig, FieldParams, render_projection
from .geometry import ScanGeometry
from .projector import PSEUDO, ProjectionImage


class DegenerateGapError(ValueError):
    """Two neighboring known angles coincide."""


class DimensionMismatchError(ValueError):
    """Images passed to the dissimilarity score have different shapes."""


@dataclass(frozen=True)
class AngleInterval:
    """Candidate range ``[lo_deg, hi_deg]`` inside the gap ``(theta_i, theta_next)``.

    Angles may exceed 360 for the wrap-around gap; callers reduce mod 360.
    """

    lo_deg: float
    hi_deg: float
    theta_i: float
    theta_next: float

    @property
    def midpoint(self) -> float:
        return (self.theta_i + self.theta_next) / 2.0

    def contains(self, angle_deg: float) -> bool:
        a = angle_deg
        if a < self.lo_deg:
            a += 360.0
        return self.lo_deg <= a <= self.hi_deg


def candidate_interval(theta_i: float, theta_next: float, a: float = 4.0) -> AngleInterval:
    """Mid-gap interval ``[m - gap/a, m + gap/a]`` that stays away from both known views."""
    if not a > 2:
        raise ValueError(f"a must be > 2, got {a}")
    gap = theta_next - theta_i
    if gap == 0:
        raise DegenerateGapError(f"zero-width gap at {theta_i} deg")
    if gap < 0:
        raise ValueError(f"theta_next ({theta_next}) must exceed theta_i ({theta_i})")
    m = (theta_i + theta_next) / 2.0
    # snap the half-width onto m's float grid so m - lo == hi - m holds exactly
    half = (m + gap / a) - m
    return AngleInterval(m - half, m + half, float(theta_i), float(theta_next))


def synthesize_projection(params: FieldParams, config: FieldConfig, geom: ScanGeometry, theta_deg: float,
                          n_samples: int = 64, weight: float = 0.5) -> ProjectionImage:
    """Render a full detector image at ``theta_deg`` from the field (midpoint sampling)."""
    if not 0 <= theta_deg < 360:
        raise ValueError(f"theta must lie in [0, 360), got {theta_deg}")
    pix = render_projection(params, config, geom, theta_deg, n_samples)
    return ProjectionImage(float(theta_deg), pix, provenance=PSEUDO, weight=weight)


def _pixels(p) -> np.ndarray:
    return np.asarray(p.pixels if isinstance(p, ProjectionImage) else p, dtype=np.float64)


def image_gradient(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences inside, one-sided differences on the border (rows, cols)."""
    gr, gc = np.gradient(p)
    return gr, gc


def gradient_dissimilarity(p_theta, p_left, p_right) -> float:
    """Mean per-pixel norm of ``grad(P) - (grad(P_left) + grad(P_right)) / 2``."""
    a, l, r = _pixels(p_theta), _pixels(p_left), _pixels(p_right)
    if not (a.shape == l.shape == r.shape) or a.ndim != 2:
        raise DimensionMismatchError(f"image shapes differ: {a.shape}, {l.shape}, {r.shape}")
    if min(a.shape) < 2:
        raise DimensionMismatchError("images need at least 2 rows and 2 columns")
    ar, ac = image_gradient(a)
    lr_, lc = image_gradient(l)
    rr, rc = image_gradient(r)
    dr = ar - 0.5 * (lr_ + rr)
    dc = ac - 0.5 * (lc + rc)
    return float(np.mean(np.sqrt(dr * dr + dc * dc)))


@dataclass
class ViewSelection:
    """Chosen angles with their dissimilarity scores and source intervals."""

    angles: list[float]
    scores: list[float]
    intervals: list[AngleInterval]

    def to_dict(self) -> dict:
        return {"angles_deg": self.angles, "scores": self.scores,
                "intervals": [[iv.lo_deg, iv.hi_deg] for iv in self.intervals]}


def known_gaps(known_angles: Sequence[float]) -> list[tuple[float, float]]:
    """Consecutive pairs of sorted angles, plus the wrap-around pair (last, first + 360)."""
    a = sorted(float(x) for x in known_angles)
    return [(a[i], a[i + 1]) for i in range(len(a) - 1)] + [(a[-1], a[0] + 360.0)]


def n_new_for_ratio(ratio: float, n_known: int) -> int:
    return int(round(ratio * n_known))


def _candidates(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, n)


def select_views_apgps(params: FieldParams, config: FieldConfig, geom: ScanGeometry,
                       known_angles: Sequence[float], n_candidates_per_gap: int = 5,
                       n_new_views: Optional[int] = None, a: float = 4.0, n_samples: int = 64,
                       reference: Optional[Mapping[float, np.ndarray]] = None,
                       report: Optional[list] = None) -> list[float]:
    """Pick new view angles, one per (sub-)interval, by maximal gradient dissimilarity.

    Gaps are visited largest first (ties: smaller start angle).  When
    ``n_new_views`` exceeds the gap count, each interval is split into
    ``ceil(n_new / n_gaps)`` equal disjoint sub-intervals, each yielding one
    angle.  Endpoint images come from ``reference`` (angle -> pixels) when
    given, otherwise they are synthesized from the field.  Candidates with
    equal scores resolve to the smaller angle.  Returns the selected angles
    sorted and reduced to [0, 360).  If ``report`` is a list, the
    :class:`ViewSelection` is appended to it.
    """
    if len(known_angles) < 2:
        raise ValueError("need at least 2 known angles")
    if n_candidates_per_gap < 1:
        raise ValueError("n_candidates_per_gap must be >= 1")
    gaps = known_gaps(known_angles)
    n_new = len(gaps) if n_new_views is None else int(n_new_views)
    if n_new <= 0:
        if report is not None:
            report.append(ViewSelection([], [], []))
        return []
    per_gap = math.ceil(n_new / len(gaps))
    order = sorted(range(len(gaps)), key=lambda i: (-(gaps[i][1] - gaps[i][0]), gaps[i][0]))
    n_gaps_used = math.ceil(n_new / per_gap)
    cache: dict[float, np.ndarray] = {}

    def image_at(theta: float) -> np.ndarray:
        key = round(theta % 360.0, 9)
        if reference is not None:
            for k, v in reference.items():
                if abs((float(k) - key + 180.0) % 360.0 - 180.0) < 1e-9:
                    return np.asarray(v, dtype=np.float64)
        if key not in cache:
            cache[key] = render_projection(params, config, geom, key % 360.0, n_samples)
        return cache[key]

    picked: list[tuple[float, float, AngleInterval]] = []
    for gi in order[:n_gaps_used]:
        t0, t1 = gaps[gi]
        iv = candidate_interval(t0, t1, a)
        left, right = image_at(t0), image_at(t1)
        edges = np.linspace(iv.lo_deg, iv.hi_deg, per_gap + 1)
        for s in range(per_gap):
            # Sub-intervals share no candidate: shrink all but the first by one candidate step.
            lo, hi = edges[s], edges[s + 1]
            if s > 0 and n_candidates_per_gap > 1:
                lo += (hi - lo) / n_candidates_per_gap
            cands = _candidates(lo, hi, n_candidates_per_gap)
            scores = [gradient_dissimilarity(image_at(c), left, right) for c in cands]
            best = int(np.argmax(scores))  # first maximum -> smallest angle
            sub = AngleInterval(float(lo), float(hi), t0, t1)
            picked.append((float(cands[best]) % 360.0, float(scores[best]), sub))
    picked = picked[:n_new]
    picked.sort(key=lambda x: x[0])
    known = {round(float(k) % 360.0, 9) for k in known_angles}
    for ang, _, _ in picked:
        if round(ang, 9) in known:
            raise RuntimeError(f"selected angle {ang} coincides with a known view")
    sel = ViewSelection([p[0] for p in picked], [p[1] for p in picked], [p[2] for p in picked])
    if report is not None:
        report.append(sel)
    return sel.angles
