"""Gibbs samplers for Bayesian matrix factorization with contextual topic biases.

Three variants share one sampler: ``bpmf`` (factors only), ``m3f`` (a fixed
number of user and item topics) and ``im3f`` (topic counts learned through a
Chinese restaurant franchise).
"""
__version__ = "0.1.0"

from .gibbs import ModelConfig, evaluate, init_state, predict, predict_pairs, run_chain  # noqa: E402
from .model import Hyperparameters, RatingsDataset  # noqa: E402

__all__ = [
    "Hyperparameters",
    "ModelConfig",
    "RatingsDataset",
    "evaluate",
    "init_state",
    "predict",
    "predict_pairs",
    "run_chain",
]
