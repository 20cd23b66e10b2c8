"""Self-contained 1D residual-SE convolutional regressor.

Forward, backward, optimizer, and serialization are implemented directly on
numpy arrays so gradients are exact, training is bitwise reproducible for a
given seed, and checkpoints round-trip byte for byte.
"""

from .model import ModelParams, NetConfig, backward, forward, forward_with_cache, init_params
from .ops import conv1d, dense, global_avg_pool, relu, se_block, sigmoid
from .train import AdamState, TrainConfig, TrainState, predict, train
from .checkpoint import load_checkpoint, save_checkpoint
from .saliency import input_gradient, saliency

__all__ = [
    "AdamState",
    "ModelParams",
    "NetConfig",
    "TrainConfig",
    "TrainState",
    "backward",
    "conv1d",
    "dense",
    "forward",
    "forward_with_cache",
    "global_avg_pool",
    "init_params",
    "input_gradient",
    "load_checkpoint",
    "predict",
    "relu",
    "saliency",
    "save_checkpoint",
    "se_block",
    "sigmoid",
    "train",
]
