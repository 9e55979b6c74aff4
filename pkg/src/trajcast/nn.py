"""Parameter initializers and small building blocks shared by the model stages."""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .numcore import ParamTree, Tensor

MASK_VALUE = -1e9


def init_linear(tree: ParamTree, name: str, n_in: int, n_out: int, rng: np.random.Generator, dtype, bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(n_in)
    tree.add(f"{name}.weight", Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype), requires_grad=True))
    if bias:
        tree.add(f"{name}.bias", Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True))


def linear(x: Tensor, p: ParamTree, name: str) -> Tensor:
    out = nc.matmul(x, p[f"{name}.weight"])
    bias = f"{name}.bias"
    return out + p[bias] if bias in p else out


def init_layer_norm(tree: ParamTree, name: str, dim: int, dtype) -> None:
    tree.add(f"{name}.gamma", Tensor(np.ones(dim, dtype=dtype), requires_grad=True))
    tree.add(f"{name}.beta", Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))


def layer_norm(x: Tensor, p: ParamTree, name: str) -> Tensor:
    return nc.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])


def init_mlp(tree: ParamTree, name: str, n_in: int, n_hidden: int, n_out: int, rng, dtype) -> None:
    init_linear(tree, f"{name}.fc1", n_in, n_hidden, rng, dtype)
    init_linear(tree, f"{name}.fc2", n_hidden, n_out, rng, dtype)


def mlp(x: Tensor, p: ParamTree, name: str, dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """affine -> ReLU -> (dropout) -> affine."""
    h = nc.relu(linear(x, p, f"{name}.fc1"))
    h = nc.dropout(h, dropout, rng, training)
    return linear(h, p, f"{name}.fc2")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., L, H] -> [..., heads, L, H / heads]."""
    *lead, length, hidden = x.shape
    x = nc.reshape(x, (*lead, length, heads, hidden // heads))
    n = x.ndim
    perm = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return nc.transpose(x, perm)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, L, d] -> [..., L, heads * d]."""
    *lead, heads, length, d = x.shape
    n = x.ndim
    perm = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return nc.reshape(nc.transpose(x, perm), (*lead, length, heads * d))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_valid: np.ndarray | None, heads: int):
    """Multi-head softmax(QK^T / sqrt(d) + M) V over the second-to-last axis.

    ``q, k, v`` are [..., L, H]; ``key_valid`` is a boolean [..., L] array and
    invalid keys receive ``MASK_VALUE`` before the softmax. Returns the merged
    output [..., L, H] and the weights [..., heads, L, L].
    """
    d = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = nc.scale(nc.matmul(qh, nc.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d))
    if key_valid is not None:
        blocked = ~np.asarray(key_valid, dtype=bool)[..., None, None, :]
        if blocked.any():
            logits = nc.masked_fill(logits, np.broadcast_to(blocked, logits.shape), MASK_VALUE)
    weights = nc.softmax(logits, axis=-1)
    return merge_heads(nc.matmul(weights, vh)), weights


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero ``x`` wherever the boolean ``mask`` (broadcast on trailing axes) is unset."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return x
    return nc.mul(x, mask.reshape(mask.shape + (1,) * (x.ndim - mask.ndim)).astype(x.dtype))
