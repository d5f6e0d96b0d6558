"""Light transformer encoders for intent classification, on a small numpy autograd."""

from .attention import AttentionConfig, count_parameters, multi_head, relative_bias_vector, window_mask
from .autograd import Tape, Tensor, backward, no_grad
from .encoder import EncoderConfig, encode, init_weights
from .position import PositionConfig, light_position, sinusoidal_position
from .training import TrainConfig, train, warmup_lr

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "EncoderConfig",
    "PositionConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "count_parameters",
    "encode",
    "init_weights",
    "light_position",
    "multi_head",
    "no_grad",
    "relative_bias_vector",
    "sinusoidal_position",
    "train",
    "warmup_lr",
    "window_mask",
]
