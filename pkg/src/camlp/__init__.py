"""Channel-attention MLP-mixer for multi-channel time-series classification."""

from .tensor import ShapeError, Tensor
from .model import CamlpNet, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, grad_check, run_cv, train_model

__all__ = [
    "CamlpNet",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "grad_check",
    "load_checkpoint",
    "run_cv",
    "save_checkpoint",
    "train_model",
]
