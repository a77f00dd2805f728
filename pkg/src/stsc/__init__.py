"""Semantic-aware texture/structure underwater image enhancement:
network, reverse-mode differentiation, training, and evaluation metrics."""

from .backend import BACKEND
from .layers import ParamStore
from .model import ModelConfig, STSCModel, random_vgg_store
from .tensor import GradMap, GradTape, Tensor, backward

__all__ = [
    "BACKEND",
    "GradMap",
    "GradTape",
    "ModelConfig",
    "ParamStore",
    "STSCModel",
    "Tensor",
    "backward",
    "random_vgg_store",
]
