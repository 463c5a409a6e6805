"""Retrieval metrics: Recall@k over a pool, triplet precision, bootstrap CIs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .numerics import DTYPE, pairwise_cosine
from .providers import BenchmarkTriplet


def recall_at_k(
    query_embeds,
    target_ids: Sequence[str],
    pool_embeds,
    pool_ids: Sequence[str],
    ks: Sequence[int] = (1, 5, 10),
) -> dict[int, float]:
    """Percentage of queries whose target ranks in the top k of the pool.

    A pool item beats the target when its similarity is higher, or equal with
    a lower pool position.
    """
    pos = {pid: i for i, pid in enumerate(pool_ids)}
    missing = [t for t in target_ids if t not in pos]
    if missing:
        raise KeyError(f"target(s) not in pool: {missing[:5]}")
    sims = pairwise_cosine(query_embeds, pool_embeds)
    t_idx = np.array([pos[t] for t in target_ids])
    rows = np.arange(len(t_idx))
    t_sim = sims[rows, t_idx][:, None]
    cols = np.arange(sims.shape[1])[None, :]
    rank = ((sims > t_sim) | ((sims == t_sim) & (cols < t_idx[:, None]))).sum(axis=1)
    return {k: 100.0 * int((rank < k).sum()) / len(rank) for k in ks}


def _lookup(embeds, i: str) -> np.ndarray:
    try:
        return np.asarray(embeds[i], dtype=DTYPE)
    except KeyError:
        raise KeyError(f"no embedding for sample {i!r}") from None


def precision_indicators(triplets: Sequence[BenchmarkTriplet], embeds: Mapping[str, np.ndarray]) -> np.ndarray:
    """1 where cos(f+, f) > cos(f-, f_ref); f_ref is the variant when present."""
    out = np.zeros(len(triplets))
    for n, t in enumerate(triplets):
        f = _lookup(embeds, t.anchor)
        ref = _lookup(embeds, t.variant) if t.variant is not None else f
        pos = pairwise_cosine(_lookup(embeds, t.positive), f)[0, 0]
        neg = pairwise_cosine(_lookup(embeds, t.negative), ref)[0, 0]
        out[n] = float(pos > neg)
    return out


def precision(triplets: Sequence[BenchmarkTriplet], embeds: Mapping[str, np.ndarray]) -> float:
    return 100.0 * float(precision_indicators(triplets, embeds).mean())


def bootstrap_ci(indicators, iters: int = 10000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean (in percent)."""
    x = np.asarray(indicators, dtype=DTYPE)
    if x.size < 2:
        raise ValueError("bootstrap needs at least two observations")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(iters, x.size))].mean(axis=1) * 100.0
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass
class MetricsReport:
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    mR: float
    precision: float
    avg: float
    n_queries: int = 0
    ci_level: float | None = None
    ci_lower: float | None = None
    ci_upper: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self, name: str = "model") -> str:
        cols = ["Method", "R@1", "R@5", "R@10", "mR", "Prec.", "Avg."]
        vals = [name] + [
            f"{v:.2f}"
            for v in (self.recall_at_1, self.recall_at_5, self.recall_at_10, self.mR, self.precision, self.avg)
        ]
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        line = lambda xs: "  ".join(x.rjust(w) if i else x.ljust(w) for i, (x, w) in enumerate(zip(xs, widths)))
        return "\n".join([line(cols), line(["-" * w for w in widths]), line(vals)])


def aggregate(recalls: Mapping[int, float] | Sequence[float], prec: float, **extra) -> MetricsReport:
    if isinstance(recalls, Mapping):
        r1, r5, r10 = recalls[1], recalls[5], recalls[10]
    else:
        r1, r5, r10 = recalls
    mR = (r1 + r5 + r10) / 3.0
    return MetricsReport(r1, r5, r10, mR, prec, (mR + prec) / 2.0, **extra)


def evaluate_embeddings(
    embeds: Mapping[str, np.ndarray],
    triplets: Sequence[BenchmarkTriplet],
    pool_ids: Sequence[str],
    bootstrap_iters: int = 10000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[MetricsReport, np.ndarray]:
    queries = np.stack([_lookup(embeds, t.anchor) for t in triplets])
    pool = np.stack([_lookup(embeds, p) for p in pool_ids])
    recalls = recall_at_k(queries, [t.positive for t in triplets], pool, pool_ids)
    ind = precision_indicators(triplets, embeds)
    lo, hi = bootstrap_ci(ind, bootstrap_iters, level, seed)
    rep = aggregate(recalls, 100.0 * float(ind.mean()), n_queries=len(triplets), ci_level=level, ci_lower=lo, ci_upper=hi)
    return rep, ind
