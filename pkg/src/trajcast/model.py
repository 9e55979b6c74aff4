"""Full forecasting model: batching, parameter construction, forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .config import Config
from .decoder import LaplaceMixtureForecast, decode, init_decoder, to_global
from .encoder import EncodedFeatures, encode, init_encoder
from .interaction import (
    edge_inputs,
    init_interaction,
    last_valid_step,
    neighbor_mask,
    spatial_interact,
    temporal_interact,
)
from .numcore import ParamTree, Tensor
from .scene import NormalizedScene


@dataclass
class Batch:
    """Zero-padded stack of normalized scenes.

    Padding agents have an all-false ``valid`` row and are excluded from
    every attention neighbourhood.
    """

    features: np.ndarray  # [B, N, T_h, 3]
    valid: np.ndarray  # [B, N, T_h] bool
    agent_valid: np.ndarray  # [B, N] bool
    rel_offset: np.ndarray  # [B, N, N, 2]
    rel_heading: np.ndarray  # [B, N, N]
    origins: np.ndarray  # [B, N, 2]
    headings: np.ndarray  # [B, N]
    future: np.ndarray | None  # [B, N, T_f, 2] local frame
    has_future: np.ndarray  # [B, N] bool
    target: np.ndarray  # [B] index of each scene's target agent
    scenes: list[NormalizedScene]

    @property
    def size(self) -> int:
        return self.features.shape[0]


def collate(scenes: Sequence[NormalizedScene], n_agents: int | None = None) -> Batch:
    B = len(scenes)
    N = max(n_agents or 0, max(s.num_agents for s in scenes))
    T_h = scenes[0].features.shape[1]
    T_f = next((s.future_local.shape[1] for s in scenes if s.future_local is not None), 0)
    features = np.zeros((B, N, T_h, 3))
    valid = np.zeros((B, N, T_h), dtype=bool)
    rel_offset = np.zeros((B, N, N, 2))
    rel_heading = np.zeros((B, N, N))
    origins = np.zeros((B, N, 2))
    headings = np.zeros((B, N))
    future = np.zeros((B, N, T_f, 2)) if T_f else None
    has_future = np.zeros((B, N), dtype=bool)
    for b, s in enumerate(scenes):
        n = s.num_agents
        features[b, :n] = s.features
        valid[b, :n] = s.valid_mask
        rel_offset[b, :n, :n] = s.rel_offset
        rel_heading[b, :n, :n] = s.rel_heading
        origins[b, :n] = s.origins
        headings[b, :n] = s.headings
        if s.future_local is not None and future is not None:
            future[b, :n] = s.future_local
            has_future[b, :n] = s.has_future
    return Batch(
        features=features,
        valid=valid,
        agent_valid=valid[:, :, -1].copy(),
        rel_offset=rel_offset,
        rel_heading=rel_heading,
        origins=origins,
        headings=headings,
        future=future,
        has_future=has_future,
        target=np.array([s.target_index for s in scenes]),
        scenes=list(scenes),
    )


def init_params(cfg: Config, seed: int | None = None) -> ParamTree:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tree = ParamTree()
    init_encoder(tree, cfg, rng)
    init_interaction(tree, cfg, rng)
    init_decoder(tree, cfg, rng)
    return tree


@dataclass
class ForwardResult:
    forecast: LaplaceMixtureForecast
    encoded: EncodedFeatures
    s_hat: Tensor
    t_hat: Tensor


def forward(
    batch: Batch,
    params: ParamTree,
    cfg: Config,
    training: bool = False,
    rng: np.random.Generator | None = None,
    features: np.ndarray | None = None,
) -> ForwardResult:
    """Run encoder, interaction and decoder on a padded batch.

    ``features`` overrides ``batch.features`` (used by mask tests).
    """
    R = nc.Tensor((batch.features if features is None else features).astype(cfg.dtype))
    valid = batch.valid
    enc = encode(R, valid, params, cfg, training, rng)
    fused = nc.add(enc.spatial, enc.temporal)
    pooled = last_valid_step(fused, valid)
    neighbors = neighbor_mask(batch.agent_valid, batch.rel_offset, cfg.neighbor_radius)
    if cfg.spatial_interaction:
        edges = edge_inputs(batch.rel_offset, batch.rel_heading, cfg.dtype)
        s_hat = spatial_interact(pooled, edges, neighbors, params, cfg, training, rng)
    else:
        s_hat = pooled
    if cfg.temporal_interaction:
        t_hat = temporal_interact(fused, valid, params, cfg, training, rng)
    else:
        t_hat = pooled
    forecast = decode(s_hat, t_hat, params, cfg, training, rng)
    return ForwardResult(forecast, enc, s_hat, t_hat)


def predict_global(batch: Batch, params: ParamTree, cfg: Config) -> list[tuple[NormalizedScene, np.ndarray, np.ndarray, np.ndarray]]:
    """Eval-mode inference; per scene (scene, mu_global [K,N,T_f,2], b [K,N,T_f,2], pi [N,K])."""
    with nc.no_grad():
        fc = forward(batch, params, cfg, training=False).forecast
    out = []
    for i, s in enumerate(batch.scenes):
        n = s.num_agents
        mu = fc.mu.data[i][:, :n].astype(np.float64)
        out.append((s, to_global(mu, s.origins, s.headings), fc.b.data[i][:, :n].astype(np.float64), fc.pi.data[i][:n].astype(np.float64)))
    return out
