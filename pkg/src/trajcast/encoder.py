"""Stage one: per-agent temporal (LSTM + attention) and spatial (MLP + attention) encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import Config
from .errors import NumericError
from .nn import apply_mask, init_linear, init_mlp, linear, mlp, scaled_dot_attention
from .numcore import ParamTree, Tensor

INPUT_DIM = 3


@dataclass
class EncodedFeatures:
    temporal: Tensor  # T_A [B, N, T_h, H]
    spatial: Tensor  # S_A [B, N, T_h, H]
    valid_mask: np.ndarray  # [B, N, T_h]


def init_encoder(tree: ParamTree, cfg: Config, rng: np.random.Generator, prefix: str = "encoder") -> None:
    H, dtype = cfg.hidden, cfg.dtype
    for layer in range(cfg.lstm_layers):
        n_in = INPUT_DIM if layer == 0 else H
        name = f"{prefix}.lstm.{layer}"
        init_linear(tree, f"{name}.ih", n_in, 4 * H, rng, dtype)
        init_linear(tree, f"{name}.hh", H, 4 * H, rng, dtype, bias=False)
        # forget-gate bias starts at 1
        tree[f"{name}.ih.bias"].data[H : 2 * H] = 1.0
    init_mlp(tree, f"{prefix}.mlp", INPUT_DIM, H, H, rng, dtype)
    if cfg.encoder_attention:
        for axis in ("tattn", "sattn"):
            for proj in ("q", "k", "v"):
                init_linear(tree, f"{prefix}.{axis}.{proj}", H, H, rng, dtype, bias=False)
            init_linear(tree, f"{prefix}.{axis}.out", H, H, rng, dtype)


def lstm_encode(R: Tensor, valid: np.ndarray, p: ParamTree, cfg: Config, prefix: str = "encoder.lstm") -> Tensor:
    """Stacked LSTM over time for every agent; returns top-layer hidden states.

    R is [..., T, 3]. Gate order in the packed weights is (input, forget,
    candidate, output). The state is held unchanged through invalid steps, so
    padding never leaks into later hidden states.
    """
    if not np.isfinite(R.data).all():
        raise NumericError("non-finite LSTM input")
    *lead, T, _ = R.shape
    H = cfg.hidden
    M = int(np.prod(lead)) if lead else 1
    x = nc.reshape(R, (M, T, R.shape[-1]))
    step_mask = np.asarray(valid, dtype=bool).reshape(M, T)
    dtype = R.dtype
    for layer in range(cfg.lstm_layers):
        name = f"{prefix}.{layer}"
        xproj = linear(x, p, f"{name}.ih")  # [M, T, 4H]
        w_hh = p[f"{name}.hh.weight"]
        h = nc.zeros((M, H), dtype)
        c = nc.zeros((M, H), dtype)
        outputs = []
        for t in range(T):
            gates = nc.add(xproj[:, t, :], nc.matmul(h, w_hh)) if t else xproj[:, t, :]
            i = nc.sigmoid(gates[:, 0:H])
            f = nc.sigmoid(gates[:, H : 2 * H])
            g = nc.tanh(gates[:, 2 * H : 3 * H])
            o = nc.sigmoid(gates[:, 3 * H : 4 * H])
            c_new = nc.add(nc.mul(f, c), nc.mul(i, g))
            h_new = nc.mul(o, nc.tanh(c_new))
            m = step_mask[:, t]
            if m.all():
                h, c = h_new, c_new
            else:
                keep = m[:, None].astype(dtype)
                h = nc.add(nc.mul(h_new, keep), nc.mul(h, 1.0 - keep))
                c = nc.add(nc.mul(c_new, keep), nc.mul(c, 1.0 - keep))
            outputs.append(h)
        x = nc.stack(outputs, axis=1)
    return nc.reshape(x, (*lead, T, H))


def mlp_encode(R: Tensor, p: ParamTree, cfg: Config, training: bool = False, rng=None, prefix: str = "encoder.mlp") -> Tensor:
    """Position-wise two-layer MLP applied at every (agent, step)."""
    return mlp(R, p, prefix, cfg.dropout, rng, training)


def axis_attention(X: Tensor, axis: str, valid: np.ndarray, p: ParamTree, cfg: Config, prefix: str) -> tuple[Tensor, Tensor]:
    """Self-attention along one axis of X [B, N, T, H].

    ``axis="temporal"`` attends over T separately for each agent;
    ``axis="spatial"`` attends over N separately for each step. Invalid
    (agent, step) entries are excluded as keys and produce zero output.
    Returns the output and the attention weights.
    """
    if axis == "spatial":
        X = nc.transpose(X, (0, 2, 1, 3))
        key_valid = np.swapaxes(valid, 1, 2)
    elif axis == "temporal":
        key_valid = valid
    else:
        raise ValueError(f"axis must be 'temporal' or 'spatial', got {axis!r}")
    q = linear(X, p, f"{prefix}.q")
    k = linear(X, p, f"{prefix}.k")
    v = linear(X, p, f"{prefix}.v")
    heads, weights = scaled_dot_attention(q, k, v, key_valid, cfg.heads)
    out = apply_mask(linear(heads, p, f"{prefix}.out"), key_valid)
    if axis == "spatial":
        out = nc.transpose(out, (0, 2, 1, 3))
    return out, weights


def encode(R: Tensor, valid: np.ndarray, p: ParamTree, cfg: Config, training: bool = False, rng=None, prefix: str = "encoder") -> EncodedFeatures:
    """R [B, N, T, 3] -> temporal features T_A and spatial features S_A."""
    hidden = lstm_encode(R, valid, p, cfg, f"{prefix}.lstm")
    position = mlp_encode(R, p, cfg, training, rng, f"{prefix}.mlp")
    if cfg.encoder_attention:
        t_a, _ = axis_attention(hidden, "temporal", valid, p, cfg, f"{prefix}.tattn")
        s_a, _ = axis_attention(position, "spatial", valid, p, cfg, f"{prefix}.sattn")
        t_a = nc.dropout(t_a, cfg.dropout, rng, training)
        s_a = nc.dropout(s_a, cfg.dropout, rng, training)
    else:
        t_a, s_a = apply_mask(hidden, valid), apply_mask(position, valid)
    return EncodedFeatures(t_a, s_a, valid)
