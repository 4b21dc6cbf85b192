"""Federated-learning watermark laboratory.

Clients embed visually verifiable watermarks into a shared global model by
jointly training the classifier and a parameter-sharing transposed model
under a contrastive similarity loss. The package provides the simulation
loop, five aggregation schemes, modification/forgery attacks, and a
checkpoint-level verification protocol, all driven from one CLI.
"""

from fedwmlab.model import ArchConfig, ModelGraph, build_model, tiny_vgg
from fedwmlab.transpose import TransposedModel, build_transposed
from fedwmlab.metrics import SsimConfig, ssim, mse, psnr, ber, cosine, asr

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "ModelGraph",
    "build_model",
    "tiny_vgg",
    "TransposedModel",
    "build_transposed",
    "SsimConfig",
    "ssim",
    "mse",
    "psnr",
    "ber",
    "cosine",
    "asr",
    "__version__",
]
