"""Intersection masks from global-to-local similarity scores.

Scores of in-pair (positive) and cross-pair (negative) local-to-global
similarities are each summarised by a Gaussian; the threshold is the point
between the two means where the densities are equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateInputError, InvertedSignalError
from .numerics import DTYPE, pairwise_cosine

SIGMA_FLOOR = 1e-9
LINEAR = "linear"
COSINE = "cosine"


class NoCrossingError(DegenerateInputError):
    """The two densities do not cross between the means."""


@dataclass(frozen=True)
class GaussianStats:
    mu: float
    sigma: float
    n: int

    def logpdf(self, x):
        z = (np.asarray(x, dtype=DTYPE) - self.mu) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - 0.5 * math.log(2 * math.pi)

    def pdf(self, x):
        return np.exp(self.logpdf(x))


def fit_gaussian(scores) -> GaussianStats:
    s = np.asarray(scores, dtype=DTYPE).ravel()
    if s.size < 2:
        raise DegenerateInputError(f"need at least 2 scores to fit a Gaussian, got {s.size}")
    return GaussianStats(mu=float(s.mean()), sigma=float(s.std()), n=int(s.size))


def fit_gaussians(pos_scores, neg_scores) -> tuple[GaussianStats, GaussianStats]:
    return fit_gaussian(pos_scores), fit_gaussian(neg_scores)


def _log_ratio(t: float, pos: GaussianStats, neg: GaussianStats) -> float:
    """log N(t; pos) - log N(t; neg)."""
    zp = (t - pos.mu) / pos.sigma
    zn = (t - neg.mu) / neg.sigma
    return -0.5 * zp * zp + 0.5 * zn * zn + math.log(neg.sigma / pos.sigma)


def _density_gap_ok(t: float, pos: GaussianStats, neg: GaussianStats, rtol: float) -> bool:
    p, q = float(pos.pdf(t)), float(neg.pdf(t))
    return abs(p - q) < rtol * max(p, 1e-300)


def _bisect(pos: GaussianStats, neg: GaussianStats, iters: int = 200) -> float:
    lo, hi = neg.mu, pos.mu
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _log_ratio(mid, pos, neg) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def crosses_between_means(pos: GaussianStats, neg: GaussianStats) -> bool:
    """True when the log-density ratio changes sign on [mu_neg, mu_pos]."""
    return _log_ratio(neg.mu, pos, neg) <= 0 <= _log_ratio(pos.mu, pos, neg)


def qda_threshold(
    pos: GaussianStats, neg: GaussianStats, rtol: float = 1e-9, strict: bool = False
) -> float:
    """Equal-density point of two 1-D Gaussians, restricted to [mu_neg, mu_pos].

    When the densities do not cross inside the interval (small separation and
    unequal spreads) bisection ends at the endpoint where they come closest;
    ``strict=True`` raises ``NoCrossingError`` instead.
    """
    if not pos.mu > neg.mu:
        raise InvertedSignalError(
            f"positive mean {pos.mu:.6g} does not exceed negative mean {neg.mu:.6g}"
        )
    if pos.sigma <= SIGMA_FLOOR or neg.sigma <= SIGMA_FLOOR:
        raise DegenerateInputError("score distribution has (near) zero spread")
    if abs(pos.sigma - neg.sigma) < SIGMA_FLOOR:
        return 0.5 * (pos.mu + neg.mu)
    if not crosses_between_means(pos, neg):
        if strict:
            raise NoCrossingError("the densities do not cross between the two means")
        return _bisect(pos, neg)

    sp2, sn2 = pos.sigma**2, neg.sigma**2
    a = sp2 - sn2
    b = 2.0 * (pos.mu * sn2 - neg.mu * sp2)
    c = (pos.sigma * neg.mu) ** 2 - (neg.sigma * pos.mu) ** 2 + 2.0 * sp2 * sn2 * math.log(neg.sigma / pos.sigma)
    disc = b * b - 4 * a * c
    candidates = []
    if disc >= 0:
        # cancellation-free pair of roots of a t^2 + b t + c
        q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
        candidates = [q / a] + ([c / q] if q != 0 else [])
    for t in sorted(candidates, key=lambda r: abs(r - 0.5 * (pos.mu + neg.mu))):
        if not neg.mu <= t <= pos.mu:
            continue
        # one Newton step on the log-density ratio tightens the root
        slope = -(t - pos.mu) / sp2 + (t - neg.mu) / sn2
        if slope != 0:
            refined = t - _log_ratio(t, pos, neg) / slope
            if neg.mu <= refined <= pos.mu:
                t = refined
        if _density_gap_ok(t, pos, neg, rtol):
            return t
    return _bisect(pos, neg)


class QDAThreshold(BaseEstimator):
    """Fit two score Gaussians and threshold at their equal-density point.

    ``fit(pos, neg)`` sets ``threshold_``; ``predict(scores)`` returns the
    strict ``scores > threshold_`` hard mask.
    """

    def __init__(self, rtol: float = 1e-9, strict: bool = False):
        self.rtol = rtol
        self.strict = strict

    def fit(self, pos_scores, neg_scores):
        self.positive_stats_, self.negative_stats_ = fit_gaussians(pos_scores, neg_scores)
        self.threshold_ = qda_threshold(self.positive_stats_, self.negative_stats_, self.rtol, self.strict)
        return self

    def decision_function(self, scores):
        check_is_fitted(self, "threshold_")
        return self.positive_stats_.logpdf(scores) - self.negative_stats_.logpdf(scores)

    def predict(self, scores):
        check_is_fitted(self, "threshold_")
        return (np.asarray(scores, dtype=DTYPE) > self.threshold_).astype(DTYPE)


# ---------------------------------------------------------------------------
# masks


def local_global_sims(V, l_cls, L, v_cls) -> tuple[np.ndarray, np.ndarray]:
    """(S_L2V, S_V2L): image patches vs text global, text tokens vs image global."""
    s_l2v = pairwise_cosine(V, np.asarray(l_cls)[None, :])[:, 0]
    s_v2l = pairwise_cosine(L, np.asarray(v_cls)[None, :])[:, 0]
    return s_l2v, s_v2l


def hard_mask(scores, tau: float) -> np.ndarray:
    """1 where score > tau; never empty (falls back to the top-scoring token)."""
    s = np.asarray(scores, dtype=DTYPE)
    m = (s > tau).astype(DTYPE)
    if not m.any():
        m[int(np.argmax(s))] = 1.0
    return m


def evolutionary_mask(hard, rho: float) -> np.ndarray:
    return rho + (1.0 - rho) * np.asarray(hard, dtype=DTYPE)


def rho_at(step: int, total_anneal_steps: int, kind: str = LINEAR) -> float:
    if total_anneal_steps <= 0:
        raise ValueError("total_anneal_steps must be positive")
    frac = min(max(step, 0), total_anneal_steps) / total_anneal_steps
    if kind == LINEAR:
        rho = 1.0 - frac
    elif kind == COSINE:
        rho = 0.5 * (1.0 + math.cos(math.pi * frac))
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    return min(1.0, max(0.0, rho))


@dataclass
class ScheduleState:
    total_anneal_steps: int
    kind: str = LINEAR
    step: int = 0

    @property
    def rho(self) -> float:
        return rho_at(self.step, self.total_anneal_steps, self.kind)

    def advance(self) -> None:
        self.step += 1


@dataclass
class BatchThresholds:
    """Per-direction QDA fit of one batch; ``None`` where the fit was refused."""

    tau_v: float | None
    tau_l: float | None
    stats: dict
    errors: dict


def batch_thresholds(pools: dict[str, tuple[np.ndarray, np.ndarray]]) -> BatchThresholds:
    """QDA thresholds for image (L2V pools) and text (V2L pools) from GLA pools."""
    taus, stats, errors = {}, {}, {}
    for direction in ("L2V", "V2L"):
        pos, neg = pools[direction]
        try:
            gp, gn = fit_gaussians(pos, neg)
            stats[direction] = {
                "mu_pos": gp.mu, "sigma_pos": gp.sigma, "mu_neg": gn.mu, "sigma_neg": gn.sigma,
                "crossing": bool(gp.mu > gn.mu and crosses_between_means(gp, gn)),
            }
            taus[direction] = qda_threshold(gp, gn)
        except DegenerateInputError as exc:
            taus[direction] = None
            errors[direction] = f"{type(exc).__name__}: {exc}"
    return BatchThresholds(taus["L2V"], taus["V2L"], stats, errors)
