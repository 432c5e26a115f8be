"""Neural approximation of the exact frontier solver.

tokenize turns a canonical instance into fixed-width per-asset features;
the encoder maps them to per-asset weights in (0, 1); the greedy projection
makes the output feasible; train fits the whole pipeline to exact labels.
"""

from .tokens import TokenLayout, tokenize
from .encoder import (
    EncoderConfig,
    forward,
    backward,
    init_weights,
    stack_tokens,
    masked_mse,
    gradient_check,
    toy_config,
)
from .weights import save_weights, load_weights
from .predict import predict, predict_batch
from .train import TrainConfig, train, evaluate_mae, violation_rate

__all__ = [
    "TokenLayout",
    "tokenize",
    "EncoderConfig",
    "forward",
    "backward",
    "init_weights",
    "stack_tokens",
    "masked_mse",
    "gradient_check",
    "toy_config",
    "save_weights",
    "load_weights",
    "predict",
    "predict_batch",
    "TrainConfig",
    "train",
    "evaluate_mae",
    "violation_rate",
]
