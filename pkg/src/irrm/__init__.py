"""Invertible residual rescaling: an exactly invertible map between a
high-resolution image and a (low-resolution image, latent pyramid) pair."""
from .kernels import active_backend, available_backends, set_backend
from .model import (IRRM, LatentPyramid, ModelConfig, count_params, describe, model_forward, model_inverse,
                    sample_latents)
from .tensor import Tensor, no_grad, precision

__all__ = [
    "IRRM", "active_backend", "LatentPyramid", "ModelConfig", "Tensor", "available_backends", "count_params",
    "describe", "model_forward", "model_inverse", "no_grad", "precision", "sample_latents", "set_backend",
]
__version__ = "0.1.0"
