"""Stage two: gated graph-attention spatial interaction and masked temporal interaction."""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .config import Config
from .nn import MASK_VALUE, apply_mask, init_layer_norm, init_linear, init_mlp, layer_norm, linear, mlp, scaled_dot_attention
from .numcore import ParamTree, Tensor

EDGE_INPUT_DIM = 4


def padding_mask(valid: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Additive mask: 0 where valid, MASK_VALUE where invalid."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, MASK_VALUE).astype(dtype)


def init_interaction(tree: ParamTree, cfg: Config, rng: np.random.Generator, prefix: str = "interaction") -> None:
    H, dtype = cfg.hidden, cfg.dtype
    if cfg.spatial_interaction:
        for layer in range(cfg.spatial_layers):
            name = f"{prefix}.spatial.{layer}"
            init_mlp(tree, f"{name}.edge", EDGE_INPUT_DIM, H, H, rng, dtype)
            init_linear(tree, f"{name}.q", H, H, rng, dtype, bias=False)
            init_linear(tree, f"{name}.k", 2 * H, H, rng, dtype, bias=False)
            init_linear(tree, f"{name}.v", 2 * H, H, rng, dtype, bias=False)
            init_linear(tree, f"{name}.gate", 2 * H, H, rng, dtype)
            init_linear(tree, f"{name}.self", H, H, rng, dtype, bias=False)
            init_mlp(tree, f"{name}.ffn", H, cfg.ffn_hidden, H, rng, dtype)
            init_layer_norm(tree, f"{name}.norm1", H, dtype)
            init_layer_norm(tree, f"{name}.norm2", H, dtype)
        init_mlp(tree, f"{prefix}.spatial.out", H, H, H, rng, dtype)
    if cfg.temporal_interaction:
        for layer in range(cfg.temporal_layers):
            name = f"{prefix}.temporal.{layer}"
            for proj in ("q", "k", "v"):
                init_linear(tree, f"{name}.{proj}", H, H, rng, dtype, bias=False)
            init_linear(tree, f"{name}.out", H, H, rng, dtype)
            init_mlp(tree, f"{name}.ffn", H, cfg.ffn_hidden, H, rng, dtype)
            init_layer_norm(tree, f"{name}.norm1", H, dtype)
            init_layer_norm(tree, f"{name}.norm2", H, dtype)


def edge_inputs(rel_offset: np.ndarray, rel_heading: np.ndarray, dtype) -> np.ndarray:
    """[..., N, N, 4] rows of (dx, dy, cos dtheta, sin dtheta)."""
    return np.concatenate(
        [rel_offset, np.cos(rel_heading)[..., None], np.sin(rel_heading)[..., None]], axis=-1
    ).astype(dtype)


def pairwise_embed(edges: np.ndarray | Tensor, p: ParamTree, name: str) -> Tensor:
    """e_ij = MLP([offset_ij, cos dtheta_ij, sin dtheta_ij])."""
    return mlp(nc.as_tensor(edges), p, name)


def neighbor_mask(agent_valid: np.ndarray, rel_offset: np.ndarray, radius: float) -> np.ndarray:
    """[B, N, N] bool: j is a neighbor of i (self included when valid)."""
    mask = agent_valid[:, None, :] & agent_valid[:, :, None]
    if math.isfinite(radius):
        mask &= np.hypot(rel_offset[..., 0], rel_offset[..., 1]) <= radius
    # A valid agent always attends to itself.
    eye = np.eye(agent_valid.shape[1], dtype=bool)[None]
    return mask | (eye & agent_valid[:, :, None])


def spatial_layer(
    F: Tensor,
    e: Tensor,
    neighbors: np.ndarray,
    p: ParamTree,
    cfg: Config,
    name: str,
    training: bool = False,
    rng=None,
    residual: bool | None = None,
    return_parts: bool = False,
):
    """One gated graph-attention layer over agents.

    F [B, N, H] are agent features, e [B, N, N, H] pairwise embeddings
    (row i = receiver, column j = sender), ``neighbors`` [B, N, N] bool.
    With ``residual`` disabled the gated fusion is returned directly.
    """
    B, N, H = F.shape
    heads = cfg.heads
    d = H // heads
    residual = cfg.interaction_residual if residual is None else residual
    stream = F
    if residual:
        F = layer_norm(F, p, f"{name}.norm1")

    w_k, w_v = p[f"{name}.k.weight"], p[f"{name}.v.weight"]
    # W[F_j, e_ij] == F_j W[:H] + e_ij W[H:]; the sender term is shared across receivers.
    k = nc.add(nc.reshape(nc.matmul(F, w_k[:H]), (B, 1, N, H)), nc.matmul(e, w_k[H:]))
    v = nc.add(nc.reshape(nc.matmul(F, w_v[:H]), (B, 1, N, H)), nc.matmul(e, w_v[H:]))
    q = linear(F, p, f"{name}.q")

    qh = nc.reshape(q, (B, N, 1, heads, d))
    kh = nc.reshape(k, (B, N, N, heads, d))
    vh = nc.reshape(v, (B, N, N, heads, d))
    logits = nc.scale(nc.sum_(nc.mul(qh, kh), axis=-1), 1.0 / math.sqrt(d))  # [B, N, N, heads]
    blocked = ~neighbors[..., None]
    if blocked.any():
        logits = nc.masked_fill(logits, np.broadcast_to(blocked, logits.shape), MASK_VALUE)
    alpha = nc.softmax(logits, axis=2)
    m = nc.sum_(nc.mul(nc.reshape(alpha, (B, N, N, heads, 1)), vh), axis=2)
    m = nc.reshape(m, (B, N, H))

    g = nc.sigmoid(linear(nc.concat([F, m], axis=-1), p, f"{name}.gate"))
    own = linear(F, p, f"{name}.self")
    fused = nc.add(nc.mul(g, own), nc.mul(nc.sub(1.0, g), m))

    agent_valid = neighbors.any(axis=2)
    if residual:
        x = nc.add(stream, nc.dropout(fused, cfg.dropout, rng, training))
        ff = mlp(layer_norm(x, p, f"{name}.norm2"), p, f"{name}.ffn", cfg.dropout, rng, training)
        out = nc.add(x, nc.dropout(ff, cfg.dropout, rng, training))
    else:
        out = fused
    out = apply_mask(out, agent_valid)
    if return_parts:
        return out, {"alpha": alpha, "gate": g, "self": own, "message": m}
    return out


def spatial_interact(
    F: Tensor,
    edges: np.ndarray,
    neighbors: np.ndarray,
    p: ParamTree,
    cfg: Config,
    training: bool = False,
    rng=None,
    prefix: str = "interaction.spatial",
) -> Tensor:
    """Stacked spatial layers followed by a node-wise MLP -> S_hat [B, N, H]."""
    edges = nc.as_tensor(edges)
    agent_valid = neighbors.any(axis=2)
    for layer in range(cfg.spatial_layers):
        e = pairwise_embed(edges, p, f"{prefix}.{layer}.edge")
        F = spatial_layer(F, e, neighbors, p, cfg, f"{prefix}.{layer}", training, rng)
    return apply_mask(mlp(F, p, f"{prefix}.out"), agent_valid)


def temporal_layer(
    X: Tensor,
    valid: np.ndarray,
    p: ParamTree,
    cfg: Config,
    name: str,
    training: bool = False,
    rng=None,
    return_weights: bool = False,
):
    """Masked multi-head self-attention over time for each agent, then FFN.

    X is [B, N, T, H]; ``valid`` [B, N, T]. Invalid steps are removed from the
    keys via the additive padding mask and their outputs are zeroed.
    """
    h = layer_norm(X, p, f"{name}.norm1") if cfg.interaction_residual else X
    q = linear(h, p, f"{name}.q")
    k = linear(h, p, f"{name}.k")
    v = linear(h, p, f"{name}.v")
    heads, weights = scaled_dot_attention(q, k, v, valid, cfg.heads)
    attn = linear(heads, p, f"{name}.out")
    if cfg.interaction_residual:
        x = nc.add(X, nc.dropout(attn, cfg.dropout, rng, training))
        ff = mlp(layer_norm(x, p, f"{name}.norm2"), p, f"{name}.ffn", cfg.dropout, rng, training)
        out = nc.add(x, nc.dropout(ff, cfg.dropout, rng, training))
    else:
        out = attn
    out = apply_mask(out, valid)
    return (out, weights) if return_weights else out


def last_valid_step(X: Tensor, valid: np.ndarray) -> Tensor:
    """Per-agent feature at the last valid step; zeros for agents with none.

    X [B, N, T, H] -> [B, N, H].
    """
    valid = np.asarray(valid, dtype=bool)
    T = valid.shape[-1]
    last = np.where(valid.any(-1), T - 1 - np.argmax(valid[..., ::-1], axis=-1), 0)
    if np.all(last == T - 1):
        picked = X[:, :, T - 1, :]
    else:
        idx = np.broadcast_to(last[..., None, None], X.shape[:2] + (1, X.shape[-1]))
        picked = nc.reshape(nc.take_along_axis(X, idx, axis=2), X.shape[:2] + (X.shape[-1],))
    return apply_mask(picked, valid.any(-1))


def temporal_interact(
    X: Tensor,
    valid: np.ndarray,
    p: ParamTree,
    cfg: Config,
    training: bool = False,
    rng=None,
    prefix: str = "interaction.temporal",
) -> Tensor:
    """Stacked temporal layers, reduced to each agent's last valid step -> T_hat [B, N, H]."""
    for layer in range(cfg.temporal_layers):
        X = temporal_layer(X, valid, p, cfg, f"{prefix}.{layer}", training, rng)
    return last_valid_step(X, valid)
