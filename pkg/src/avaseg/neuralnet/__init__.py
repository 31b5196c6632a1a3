"""From-scratch convolutional network stack on numpy arrays.

Tensors are plain numpy arrays in (batch, channels, height, width) layout,
float32 in production and float64 for gradient checking. Every layer
implements an analytic backward pass verified against central finite
differences.
"""

from .layers import (
    Conv2D,
    BatchNorm2D,
    MaxPool2x2,
    UpsampleBilinear2x,
    Dropout,
    ReLU,
    Sigmoid,
)
from .loss import LossConfig, weighted_bce
from .model import Model, ModelConfig, build_model, save_model, load_model
from .optim import AdamConfig, AdamState, adam_step
from .train import TrainConfig, TrainHistory, train

__all__ = [
    "Conv2D", "BatchNorm2D", "MaxPool2x2", "UpsampleBilinear2x", "Dropout",
    "ReLU", "Sigmoid",
    "LossConfig", "weighted_bce",
    "Model", "ModelConfig", "build_model", "save_model", "load_model",
    "AdamConfig", "AdamState", "adam_step",
    "TrainConfig", "TrainHistory", "train",
]
