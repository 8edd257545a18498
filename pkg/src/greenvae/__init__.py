"""Desk-scale laboratory for variational autoencoders and their efficiency metrics."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, gradient_check, ops  # noqa: E402
from .config import TrainConfig, parse_config  # noqa: E402
from .layers import ModelGraph, Network, build_vanilla_cnn  # noqa: E402
from .metrics import count_flops, count_params, frechet_distance  # noqa: E402

__all__ = [
    "ModelGraph",
    "Network",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_vanilla_cnn",
    "count_flops",
    "count_params",
    "frechet_distance",
    "gradient_check",
    "ops",
    "parse_config",
]
