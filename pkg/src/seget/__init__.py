"""seget: encoder-center-decoder segmentation for electron tomography,
with every differentiable operator hand-written and gradient-checked."""

from .losses import LossConfig
from .model import NetworkConfig, SegETNetwork, build
from .tensor import ConvSpec, Parameter, Tensor
from .train import TrainConfig, TrainReport, evaluate, fit

__all__ = [
    "ConvSpec",
    "LossConfig",
    "NetworkConfig",
    "Parameter",
    "SegETNetwork",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "build",
    "evaluate",
    "fit",
]

__version__ = "0.1.0"
