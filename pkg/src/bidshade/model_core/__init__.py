"""Minimal differentiable modeling kernel: tape autodiff, DeepFM, Adam."""
from . import autodiff
from .autodiff import Node, Tape
from .checkpoint import load_model, model_from_dict, model_to_dict, save_model
from .deepfm import DeepFM, EmbeddingTable, NetSpec
from .gradcheck import grad_check
from .optim import AdamState, adam_step
from .training import TrainConfig, TrainHistory, fit

__all__ = [
    "autodiff", "Node", "Tape", "DeepFM", "EmbeddingTable", "NetSpec", "AdamState", "adam_step",
    "TrainConfig", "TrainHistory", "fit", "grad_check", "save_model", "load_model", "model_to_dict",
    "model_from_dict",
]
