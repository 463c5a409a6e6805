"""Two-stage self-supervised joint embeddings for symmetric image-text retrieval."""

from .estimator import SolarEmbedder
from .evaluation import MetricsReport, aggregate, bootstrap_ci, precision, recall_at_k
from .exceptions import (
    ConfigError, DegenerateInputError, FixtureError, InvertedSignalError, NumericalAbort, SolarError,
)
from .maskgen import QDAThreshold, qda_threshold
from .mining import HardNegativeMiner, build_index, topk_neighbors
from .model import ModelConfig, ModelParams, joint_embed
from .pipeline import RunConfig, run_pipeline
from .providers import Dataset, PairedSample, SynthConfig, load_fixture, synth_benchmark, synth_generate
from .segmentation import AdaptiveSegmenter, MeanLinkageClustering, adaptive_segment

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSegmenter", "ConfigError", "Dataset", "DegenerateInputError", "FixtureError",
    "HardNegativeMiner", "InvertedSignalError", "MeanLinkageClustering", "MetricsReport", "ModelConfig",
    "ModelParams", "NumericalAbort", "PairedSample", "QDAThreshold", "RunConfig", "SolarEmbedder",
    "SolarError", "SynthConfig", "adaptive_segment", "aggregate", "bootstrap_ci",
    "build_index", "joint_embed", "load_fixture", "precision", "qda_threshold", "recall_at_k",
    "run_pipeline", "synth_benchmark", "synth_generate", "topk_neighbors",
]
