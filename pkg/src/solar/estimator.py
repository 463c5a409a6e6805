"""scikit-learn style wrapper around the two-stage training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_dataset
from .evaluation import MetricsReport
from .pipeline import (
    RunConfig, RunData, embed_samples, evaluate, mask_f1, mine, predicted_masks, train_stage1,
    train_stage2,
)
from .providers import Benchmark


class SolarEmbedder(TransformerMixin, BaseEstimator):
    """Learns joint image-text embeddings from paired token features.

    ``fit`` runs mask learning, hard-negative mining and contrastive
    training; ``transform`` maps pairs to unit-norm joint embeddings.

    Examples
    --------
    >>> from solar import SolarEmbedder, SynthConfig, synth_generate
    >>> X = synth_generate(SynthConfig(), 128)
    >>> emb = SolarEmbedder(stage1_steps=5, stage2_steps=2, stage2_batch_size=4).fit(X)
    >>> emb.transform(X[:3]).shape
    (3, 16)
    """

    def __init__(
        self,
        d: int = 16,
        heads: int = 2,
        hidden: int = 32,
        layers: int = 3,
        tie_adapter_init: bool = True,
        stage1_steps: int = 500,
        stage1_batch_size: int = 64,
        stage1_lr: float = 0.3,
        lambdas: tuple = (1.0, 1.0, 5.0),
        delta: float = 0.1,
        stage2_steps: int = 300,
        stage2_batch_size: int = 16,
        stage2_lr: float = 0.3,
        use_mined: bool = True,
        constructed_negatives: bool = True,
        positive_mode: str = "intersection",
        seed: int = 0,
    ):
        self.d = d
        self.heads = heads
        self.hidden = hidden
        self.layers = layers
        self.tie_adapter_init = tie_adapter_init
        self.stage1_steps = stage1_steps
        self.stage1_batch_size = stage1_batch_size
        self.stage1_lr = stage1_lr
        self.lambdas = lambdas
        self.delta = delta
        self.stage2_steps = stage2_steps
        self.stage2_batch_size = stage2_batch_size
        self.stage2_lr = stage2_lr
        self.use_mined = use_mined
        self.constructed_negatives = constructed_negatives
        self.positive_mode = positive_mode
        self.seed = seed

    def run_config(self) -> RunConfig:
        cfg = RunConfig.from_dict({
            "seed": self.seed,
            "model": {"d": self.d, "heads": self.heads, "hidden": self.hidden, "layers": self.layers,
                      "tie_adapter_init": self.tie_adapter_init},
            "stage1": {"steps": self.stage1_steps, "batch_size": self.stage1_batch_size, "lr": self.stage1_lr,
                       "lambdas": list(self.lambdas), "delta": self.delta},
            "stage2": {"steps": self.stage2_steps, "batch_size": self.stage2_batch_size, "lr": self.stage2_lr,
                       "use_mined": self.use_mined, "constructed_negatives": self.constructed_negatives,
                       "positive_mode": self.positive_mode},
        })
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        ds = check_dataset(X, min_samples=max(self.stage1_batch_size, self.stage2_batch_size, 12))
        cfg = self.run_config()
        data = RunData(train=ds, heldout=ds[:0])
        s1 = train_stage1(cfg, data)
        index = mine(cfg, s1.params, ds) if self.use_mined else None
        s2 = train_stage2(cfg, s1.params, data, index)
        self.stage1_params_, self.params_ = s1.params, s2.params
        self.stage1_log_, self.stage2_log_ = s1.log, s2.log
        self.hard_negatives_ = index
        self.embedding_dim_ = self.d
        return self

    def fit_stage1(self, X, y=None):
        """Only the mask-learning stage; ``transform`` then uses Stage-1 weights."""
        ds = check_dataset(X, min_samples=self.stage1_batch_size)
        s1 = train_stage1(self.run_config(), RunData(train=ds, heldout=ds[:0]))
        self.stage1_params_ = self.params_ = s1.params
        self.stage1_log_, self.stage2_log_ = s1.log, []
        self.hard_negatives_ = None
        self.embedding_dim_ = self.d
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return embed_samples(self.params_, list(check_dataset(X)))

    def predict_masks(self, X) -> list[tuple[np.ndarray, np.ndarray]]:
        """Hard intersection masks (image, text) per pair, thresholded over the whole input."""
        check_is_fitted(self, "stage1_params_")
        masks, _ = predicted_masks(list(check_dataset(X, min_samples=2)), self.stage1_params_, self.delta)
        return masks

    def mask_f1(self, X) -> dict:
        check_is_fitted(self, "stage1_params_")
        return mask_f1(list(check_dataset(X, min_samples=2, require_ground_truth=True)), self.stage1_params_, self.delta)

    def evaluate(self, benchmark: Benchmark, bootstrap_iters: int = 10000) -> MetricsReport:
        check_is_fitted(self, "params_")
        cfg = self.run_config()
        cfg.benchmark.bootstrap_iters = bootstrap_iters
        return evaluate(cfg, self.params_, benchmark)[0]

    def score(self, benchmark: Benchmark, y=None) -> float:
        """Benchmark Avg (mean of mR and Precision)."""
        return self.evaluate(benchmark, bootstrap_iters=1000).avg
