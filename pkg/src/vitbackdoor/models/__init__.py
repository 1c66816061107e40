"""Tiny ViT / CNN classifiers, training loop and checkpoints."""

from .base import ClassifierModel
from .checkpoint import Checkpoint, build_model, load_checkpoint, save_checkpoint
from .cnn import TinyCNN, TinyCNNConfig, build_tiny_cnn
from .training import EpochMetrics, TrainConfig, TrainResult, predict, train
from .vit import TinyViT, TinyViTConfig, build_tiny_vit

__all__ = [
    "ClassifierModel",
    "Checkpoint",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "TinyCNN",
    "TinyCNNConfig",
    "build_tiny_cnn",
    "EpochMetrics",
    "TrainConfig",
    "TrainResult",
    "predict",
    "train",
    "TinyViT",
    "TinyViTConfig",
    "build_tiny_vit",
]
