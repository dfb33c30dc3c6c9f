"""Noisy-label classification with a semantically regularised VAE."""

from .data import Dataset, SyntheticSpec, generate, load_features, save_features
from .encoding import SemanticMatrix, gmm_fit, hybrid_concat, learn_transform
from .evaluation import RunReport, noise_sweep, run_ablation
from .model import SemanticVAE, WsciConfig, outlier_scores, predict, train

__all__ = [
    "Dataset", "SyntheticSpec", "generate", "load_features", "save_features",
    "SemanticMatrix", "gmm_fit", "hybrid_concat", "learn_transform",
    "RunReport", "noise_sweep", "run_ablation",
    "SemanticVAE", "WsciConfig", "outlier_scores", "predict", "train",
]
__version__ = "0.1.0"
