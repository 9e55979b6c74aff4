"""Laplace mixture decoder and local/global frame mapping of forecasts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .config import Config
from .errors import NumericError, SchemaError
from .nn import init_mlp, linear, mlp
from .numcore import ParamTree, Tensor
from .scene import rotate

SCALE_FLOOR = 1e-4


@dataclass
class LaplaceMixtureForecast:
    """Batched forecast in each agent's local frame.

    mu, b: [B, K, N, T_f, 2]; pi: [B, N, K]; raw: regression head output
    [B, K, N, T_f, 4].
    """

    mu: Tensor
    b: Tensor
    pi: Tensor
    raw: Tensor

    def scene(self, index: int) -> "SceneForecast":
        return SceneForecast(self.mu.data[index], self.b.data[index], self.pi.data[index])


@dataclass
class SceneForecast:
    """Plain arrays for one scene: mu, b [K, N, T_f, 2]; pi [N, K]."""

    mu: np.ndarray
    b: np.ndarray
    pi: np.ndarray


def init_decoder(tree: ParamTree, cfg: Config, rng: np.random.Generator, prefix: str = "decoder") -> None:
    H = cfg.hidden
    init_mlp(tree, f"{prefix}.fuse", 2 * H, H, H, rng, cfg.dtype)
    init_mlp(tree, f"{prefix}.reg", H, H, cfg.K * cfg.T_f * 4, rng, cfg.dtype)
    init_mlp(tree, f"{prefix}.cls", H, H, cfg.K, rng, cfg.dtype)


def decode(
    s_hat: Tensor,
    t_hat: Tensor,
    p: ParamTree,
    cfg: Config,
    training: bool = False,
    rng=None,
    prefix: str = "decoder",
) -> LaplaceMixtureForecast:
    """[S_hat, T_hat] -> K Laplace trajectories per agent plus mode probabilities.

    With ``cfg.cumulative_offsets`` the location channels are per-step offsets
    and mu is their running sum along the horizon.
    """
    for name, t in p.items():
        if name.startswith(prefix) and not np.isfinite(t.data).all():
            raise NumericError(f"non-finite decoder parameter {name}")
    if s_hat.shape != t_hat.shape:
        raise ValueError(f"S_hat {s_hat.shape} and T_hat {t_hat.shape} disagree")
    B, N, H = s_hat.shape
    K, T_f = cfg.K, cfg.T_f
    fused = nc.relu(mlp(nc.concat([s_hat, t_hat], axis=-1), p, f"{prefix}.fuse", cfg.dropout, rng, training))
    raw = mlp(fused, p, f"{prefix}.reg", cfg.dropout, rng, training)
    raw = nc.transpose(nc.reshape(raw, (B, N, K, T_f, 4)), (0, 2, 1, 3, 4))  # [B, K, N, T_f, 4]
    loc = raw[..., 0:2]
    if cfg.cumulative_offsets:
        lower = np.tril(np.ones((T_f, T_f), dtype=raw.dtype))
        loc = nc.matmul(nc.Tensor(lower), loc)
    scale = nc.softplus(raw[..., 2:4]) + SCALE_FLOOR
    pi = nc.softmax(mlp(fused, p, f"{prefix}.cls", cfg.dropout, rng, training), axis=-1)
    return LaplaceMixtureForecast(loc, scale, pi, raw)


def to_global(mu: np.ndarray, origins: np.ndarray, headings: np.ndarray) -> np.ndarray:
    """Local-frame locations [K, N, T_f, 2] -> global frame (rotate by +theta, then translate)."""
    return rotate(mu, headings[None, :, None]) + origins[None, :, None, :]


def to_local(points: np.ndarray, origins: np.ndarray, headings: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_global`."""
    return rotate(points - origins[None, :, None, :], -headings[None, :, None])


# -- prediction files ----------------------------------------------------------

@dataclass
class AgentPrediction:
    scene_id: str
    agent_id: str
    pi: np.ndarray  # [K]
    traj: np.ndarray  # [K, T_f, 2] global frame


def prediction_records(scene_id: str, agent_ids: Sequence[str], mu_global: np.ndarray, pi: np.ndarray) -> list[dict]:
    records = []
    for n, agent_id in enumerate(agent_ids):
        modes = [
            {"pi": float(pi[n, k]), "traj": [[float(x), float(y)] for x, y in mu_global[k, n]]}
            for k in range(mu_global.shape[0])
        ]
        records.append({"scene_id": scene_id, "agent_id": agent_id, "modes": modes})
    return records


def write_predictions(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path: str | Path) -> list[AgentPrediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                modes = rec["modes"]
                pi = np.array([m["pi"] for m in modes], dtype=np.float64)
                traj = np.array([m["traj"] for m in modes], dtype=np.float64)
                if traj.ndim != 3 or traj.shape[-1] != 2:
                    raise SchemaError("traj entries must be [x, y]")
                out.append(AgentPrediction(str(rec["scene_id"]), str(rec["agent_id"]), pi, traj))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad prediction record ({exc})") from None
    return out
