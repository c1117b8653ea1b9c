"""Mixture-of-experts ranking with hierarchical gate constraints and
adversarial expert regularization."""

from .data import CategoryTree, Dataset, SynthSpec, generate_synthetic, load_dir, load_records
from .estimator import DivergenceError, MoERanker
from .metrics import feature_importance, gate_cluster_separation, ndcg, session_auc
from .model import ModelConfig, MoENet
from .numcore import ConfigurationError
from .train import ExperimentResult, TrainConfig, run_comparison, sweep

__version__ = "0.1.0"

__all__ = [
    "CategoryTree", "ConfigurationError", "Dataset", "DivergenceError", "ExperimentResult",
    "ModelConfig", "MoENet", "MoERanker", "SynthSpec", "TrainConfig", "feature_importance",
    "gate_cluster_separation", "generate_synthetic", "load_dir", "load_records", "ndcg",
    "run_comparison", "session_auc", "sweep",
]
