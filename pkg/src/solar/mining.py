"""Offline hard-negative mining by exact cosine top-k retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateInputError
from .numerics import DTYPE, pairwise_cosine


def topk_neighbors(queries, corpus, k: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the ``k`` most cosine-similar corpus rows for each query.

    Ties go to the lower corpus index.  With ``exclude_self`` query ``i`` is
    never matched to corpus row ``i``.
    """
    corpus = np.atleast_2d(np.asarray(corpus, dtype=DTYPE))
    c = corpus.shape[0]
    if c <= k:
        raise ValueError(f"corpus of {c} rows cannot supply k={k} neighbours")
    sims = pairwise_cosine(queries, corpus)
    if exclude_self:
        m = min(sims.shape[0], c)
        sims[np.arange(m), np.arange(m)] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


@dataclass
class HardNegativeIndex:
    """anchor id -> {negative id: [spaces that retrieved it]}, insertion-ordered."""

    entries: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    def negatives(self, anchor_id: str) -> list[str]:
        return list(self.entries.get(anchor_id, {}))

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for anchor, negs in self.entries.items():
                fh.write(json.dumps({"anchor_id": anchor, "negatives": [[n, p] for n, p in negs.items()]}) + "\n")

    @classmethod
    def load(cls, path) -> "HardNegativeIndex":
        entries = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    entries[d["anchor_id"]] = {n: list(p) for n, p in d["negatives"]}
        return cls(entries)


FeatureSpace = tuple[np.ndarray, np.ndarray]  # (query table, corpus table), rows aligned with ids


def build_index(ids: Sequence[str], spaces: Mapping[str, FeatureSpace | np.ndarray], k: int = 10) -> HardNegativeIndex:
    """Union of per-space top-k neighbours (self excluded) for every sample.

    A space is either one table (queries and corpus coincide) or a
    ``(queries, corpus)`` pair for cross-modal retrieval.
    """
    ids = list(ids)
    n = len(ids)
    entries: dict[str, dict[str, list[str]]] = {i: {} for i in ids}
    for name, space in spaces.items():
        q, c = (space, space) if isinstance(space, np.ndarray) else space
        for label, table in (("queries", q), ("corpus", c)):
            if table.shape[0] != n:
                missing = ids[table.shape[0]] if table.shape[0] < n else "<extra rows>"
                raise DegenerateInputError(
                    f"space {name!r} {label} cover {table.shape[0]} of {n} samples (first missing: {missing})"
                )
        nbrs = topk_neighbors(q, c, k, exclude_self=True)
        for i, row in enumerate(nbrs):
            bucket = entries[ids[i]]
            for j in row:
                bucket.setdefault(ids[j], []).append(name)
    return HardNegativeIndex(entries)


def sample_negatives(index: HardNegativeIndex, anchor_id: str, n: int, rng: np.random.Generator) -> list[str]:
    pool = [x for x in index.negatives(anchor_id) if x != anchor_id]
    if len(pool) <= n:
        return pool
    pick = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in pick]


class HardNegativeMiner(BaseEstimator):
    """Estimator wrapper: ``fit(ids, spaces)`` builds ``index_``."""

    def __init__(self, k: int = 10, n_sample: int = 2):
        self.k = k
        self.n_sample = n_sample

    def fit(self, ids, spaces):
        self.index_ = build_index(ids, spaces, self.k)
        return self

    def sample(self, anchor_id: str, rng: np.random.Generator) -> list[str]:
        check_is_fitted(self, "index_")
        return sample_negatives(self.index_, anchor_id, self.n_sample, rng)
