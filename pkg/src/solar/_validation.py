"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import FixtureError
from .providers import Dataset, PairedSample


def check_dataset(X, min_samples: int = 1, require_ground_truth: bool = False) -> Dataset:
    """Coerce ``X`` (a Dataset or a sequence of PairedSample) into a validated Dataset."""
    if isinstance(X, Dataset):
        ds = X
    elif isinstance(X, Sequence) and all(isinstance(s, PairedSample) for s in X):
        ds = Dataset(list(X))
    else:
        raise TypeError(f"expected a Dataset or a sequence of PairedSample, got {type(X).__name__}")
    if len(ds) < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {len(ds)}")
    if require_ground_truth:
        missing = [s.id for s in ds if s.ground_truth is None]
        if missing:
            raise FixtureError(f"samples without ground-truth masks: {missing[:5]}")
    return ds


def check_embeddings(E, dim: int | None = None) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {E.shape}")
    if dim is not None and E.shape[1] != dim:
        raise ValueError(f"embedding dim {E.shape[1]} != expected {dim}")
    if not np.isfinite(E).all():
        raise ValueError("embeddings contain non-finite values")
    return E
