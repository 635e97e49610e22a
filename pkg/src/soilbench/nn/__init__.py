"""Minimal autodiff engine and the soiling network."""
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (DET, IMAGE, SEG, TILE, Conv2d, DetHead, Encoder, EncoderConfig, Module,
                     ModelConfig, ResidualBlock, SegHead, SoilingHead, SoilingNet)
from .optim import Adam
from .tensor import Parameter, Tensor
from .train import TrainConfig, fit, grid_search, multitask_loss, predict

__all__ = [
    "Adam", "Conv2d", "DET", "DetHead", "Encoder", "EncoderConfig", "IMAGE", "Module",
    "ModelConfig", "Parameter", "ResidualBlock", "SEG", "SegHead", "SoilingHead", "SoilingNet",
    "TILE", "Tensor", "TrainConfig", "fit", "grid_search", "load_checkpoint", "multitask_loss",
    "predict", "save_checkpoint",
]
