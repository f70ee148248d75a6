"""Differentiable dense-tensor core: ops, tape, gradients, optimizer, file IO."""

from .fdcheck import FiniteDiffReport, finite_diff_check
from .optim import AdamWState, OptimizerState, adamw_step, sgd_step
from .ops import (
    OP_REGISTRY,
    add,
    affine,
    backward,
    bilinear,
    clamp,
    concat,
    div,
    dot,
    exp,
    expand,
    forward_op,
    gather,
    l2_normalize,
    layer_norm,
    log,
    logsumexp,
    matmul,
    max_over_axis,
    max_with_indices,
    mean,
    mul,
    neg,
    pair_dot,
    relu,
    reshape,
    scaled_dot_attention,
    slice_,
    softmax_logsumexp,
    sqrt,
    sub,
    sum_,
    take_rowwise,
    tanh,
    transpose,
)
from .tensor import Tape, TapeNode, Tensor
from .tensorio import load_tensor, save_tensor

__all__ = [
    "FiniteDiffReport",
    "finite_diff_check",
    "AdamWState",
    "OptimizerState",
    "adamw_step",
    "sgd_step",
    "OP_REGISTRY",
    "forward_op",
    "backward",
    "Tape",
    "TapeNode",
    "Tensor",
    "load_tensor",
    "save_tensor",
    "add", "affine", "bilinear", "clamp", "concat", "div", "dot", "exp",
    "expand", "gather", "l2_normalize", "layer_norm", "log", "logsumexp",
    "matmul", "max_over_axis", "max_with_indices", "mean", "mul", "neg",
    "pair_dot", "relu", "reshape", "scaled_dot_attention", "slice_",
    "softmax_logsumexp", "sqrt", "sub", "sum_", "take_rowwise", "tanh",
    "transpose",
]
