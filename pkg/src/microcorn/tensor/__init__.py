"""Minimal dense-tensor library with reverse-mode differentiation."""
from . import functional, kernels
from .core import (
    ComputationGraph,
    ContractError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    is_grad_enabled,
    no_grad,
    zero_grads,
)
from .functional import (
    causal_attention,
    concat,
    embedding,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    sigmoid,
    softmax,
    softmax_cross_entropy,
)
from .nn import MLP, LayerNorm, Linear, Module, Parameter
from .optim import Optimizer, OptimizerState, clip_grad_norm, optimizer_step

__all__ = [
    "ComputationGraph", "ContractError", "ShapeError", "Tensor", "as_tensor", "backward",
    "is_grad_enabled", "no_grad", "zero_grads", "functional", "kernels", "causal_attention",
    "concat", "embedding", "gelu", "l2_normalize", "layer_norm", "matmul", "sigmoid", "softmax",
    "softmax_cross_entropy", "MLP", "LayerNorm", "Linear", "Module", "Parameter", "Optimizer",
    "OptimizerState", "clip_grad_norm", "optimizer_step",
]
