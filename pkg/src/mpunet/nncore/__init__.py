"""Minimal NHWC autodiff engine: graph, layers, loss, Adam and gradient checks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .graph import (INFER, TRAIN, GraphError, LossValue, NetworkGraph, Node, activation_bytes,
                    backward, forward, loss, predict_proba)
from .layers import softmax
from .optim import OptimState, adam_step

__all__ = [
    "INFER", "TRAIN", "GraphError", "LossValue", "NetworkGraph", "Node", "OptimState",
    "activation_bytes", "adam_step", "backward", "forward", "load_checkpoint", "loss",
    "predict_proba", "save_checkpoint", "softmax",
]
