"""Minimal numpy-backed tensors with reverse-mode autodiff."""

from .optim import AdamState, adamw_step, clip_grad_norm, cosine_lr
from .params import ParamTree, load_checkpoint, save_checkpoint
from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    clamp_min,
    concat,
    div,
    dropout,
    exp,
    is_grad_enabled,
    layer_norm,
    log,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    take_along_axis,
    tanh,
    transpose,
    where_mask,
    zeros,
)

__all__ = [name for name in dir() if not name.startswith("_")]
