"""Image segmentation by mean-linkage agglomerative clustering of patch features.

The merge order of agglomerative clustering does not depend on the distance
threshold (the threshold only decides where to stop), so the full merge
sequence is computed once and cut at each threshold the adaptive search tries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .numerics import DTYPE, pairwise_cosine


def pairwise_distances(X, metric: str = "cosine") -> np.ndarray:
    X = np.asarray(X, dtype=DTYPE)
    if metric == "cosine":
        return 1.0 - pairwise_cosine(X, X)
    if metric == "euclidean":
        sq = (X * X).sum(1)
        return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def linkage_sequence(X, metric: str = "cosine") -> list[tuple[int, int, float]]:
    """Full mean-linkage merge sequence.

    Each entry ``(a, b, dist)`` merges the clusters whose lowest patch indices
    are ``a < b``.  Ties on distance go to the lexicographically smallest
    ``(a, b)``.
    """
    D = pairwise_distances(X, metric)
    n = D.shape[0]
    # sums of pairwise distances between clusters, keyed by lowest member
    S = D.copy()
    size = np.ones(n)
    mean = S.copy()
    np.fill_diagonal(mean, np.inf)
    merges = []
    for _ in range(n - 1):
        flat = int(np.argmin(mean))
        a, b = divmod(flat, n)
        if a > b:
            a, b = b, a
        merges.append((a, b, float(mean[a, b])))
        S[a, :] += S[b, :]
        S[:, a] += S[:, b]
        size[a] += size[b]
        size[b] = 0
        with np.errstate(divide="ignore", invalid="ignore"):
            row = S[a, :] / (size[a] * size)
        row[size == 0] = np.inf
        row[a] = np.inf
        mean[a, :] = row
        mean[:, a] = row
        mean[b, :] = np.inf
        mean[:, b] = np.inf
    return merges


def cut_merges(merges: list[tuple[int, int, float]], n: int, t: float) -> np.ndarray:
    """Labels after applying merges in order while their distance is < t."""
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b, dist in merges:
        if not dist < t:
            break
        parent[find(b)] = find(a)
    roots = [find(i) for i in range(n)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=int)


def mean_linkage_cluster(X, t: float, metric: str = "cosine") -> np.ndarray:
    """Cluster labels (numbered by first occurrence) at distance threshold ``t``."""
    X = np.asarray(X, dtype=DTYPE)
    if X.shape[0] == 1:
        return np.zeros(1, dtype=int)
    return cut_merges(linkage_sequence(X, metric), X.shape[0], t)


@dataclass
class Segmentation:
    labels: np.ndarray
    segments: list[np.ndarray]
    threshold_used: float
    scores: np.ndarray | None = None
    trace: list[dict] = field(default_factory=list)

    @classmethod
    def from_labels(cls, labels: np.ndarray, t: float, trace=None) -> "Segmentation":
        segs = [np.flatnonzero(labels == k) for k in range(int(labels.max()) + 1)]
        return cls(labels=labels, segments=segs, threshold_used=t, trace=list(trace or []))

    @property
    def n_segments(self) -> int:
        return len(self.segments)


def adaptive_segment(
    X,
    t_init: float = 0.45,
    dt: float = 0.05,
    n_iter: int = 5,
    r_max: float = 0.87,
    k_max: int = 5,
    metric: str = "cosine",
) -> Segmentation:
    """Iterative clustering that nudges the threshold until segment sizes are sane.

    Too large a segment lowers the threshold; too many segments raise it; the
    last clustering is returned when neither holds or iterations run out.
    """
    X = np.asarray(X, dtype=DTYPE)
    n = X.shape[0]
    merges = linkage_sequence(X, metric) if n > 1 else []
    t = t_init
    trace = []
    labels = np.zeros(n, dtype=int)
    used = t
    for _ in range(n_iter):
        labels = cut_merges(merges, n, t)
        used = t
        k = int(labels.max()) + 1
        r = np.bincount(labels).max() / n
        trace.append({"t": t, "segments": k, "largest_fraction": float(r)})
        if r > r_max:
            t = t - dt
        elif k > k_max:
            t = t + dt
        else:
            break
    return Segmentation.from_labels(labels, used, trace)


def score_segments(seg: Segmentation, s_l2v) -> np.ndarray:
    s = np.asarray(s_l2v, dtype=DTYPE)
    scores = np.array([s[idx].mean() for idx in seg.segments])
    seg.scores = scores
    return scores


def split_by_threshold(seg: Segmentation, tau: float) -> tuple[list[int], list[int]]:
    """Segment indices above ``tau`` (intersection) and the rest (difference)."""
    if seg.scores is None:
        raise ValueError("score the segments first")
    inter = [k for k, s in enumerate(seg.scores) if s > tau]
    diff = [k for k, s in enumerate(seg.scores) if not s > tau]
    return inter, diff


class MeanLinkageClustering(ClusterMixin, BaseEstimator):
    """Agglomerative clustering with mean linkage and a distance threshold."""

    def __init__(self, distance_threshold: float = 0.45, metric: str = "cosine"):
        self.distance_threshold = distance_threshold
        self.metric = metric

    def fit(self, X, y=None):
        self.labels_ = mean_linkage_cluster(X, self.distance_threshold, self.metric)
        self.n_clusters_ = int(self.labels_.max()) + 1
        return self


class AdaptiveSegmenter(ClusterMixin, BaseEstimator):
    """Patch segmentation with the adaptive-threshold search."""

    def __init__(self, t_init=0.45, dt=0.05, n_iter=5, r_max=0.87, k_max=5, metric="cosine"):
        self.t_init = t_init
        self.dt = dt
        self.n_iter = n_iter
        self.r_max = r_max
        self.k_max = k_max
        self.metric = metric

    def fit(self, X, y=None):
        self.segmentation_ = adaptive_segment(
            X, self.t_init, self.dt, self.n_iter, self.r_max, self.k_max, self.metric
        )
        self.labels_ = self.segmentation_.labels
        self.threshold_ = self.segmentation_.threshold_used
        return self
