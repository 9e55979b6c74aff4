"""Winner-takes-all Laplace loss, soft-target classification loss, training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .config import Config, load_config, write_resolved
from .decoder import LaplaceMixtureForecast
from .errors import CheckpointError, ConfigError, NumericError
from .evaluation import min_ade, min_fde, miss_rate
from .model import Batch, collate, forward, init_params
from .numcore import AdamState, ParamTree, Tensor
from .scene import NormalizedScene, Scene, normalize

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "lr", "loss", "loss_reg", "loss_cls", "val_minade", "val_minfde", "val_mr"]
PROB_FLOOR = 1e-12


class TrainingDiverged(NumericError):
    """Loss became non-finite; the last good checkpoint has been written."""


@dataclass
class LossBreakdown:
    total: Tensor
    reg: Tensor
    cls: Tensor
    k_star: np.ndarray  # [B, N] best mode per agent (-1 where unsupervised)
    target: np.ndarray  # [B, N, K] soft classification targets


# -- loss pieces (unbatched shapes: mu [K, N, T_f, 2], pi [N, K]) -------------

def best_mode(mu: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """argmin_k of the summed squared displacement; ties go to the lowest k."""
    err = ((np.asarray(mu) - truth[None]) ** 2).sum(axis=(-1, -2))  # [K, N]
    return np.argmin(err, axis=0)


def _select_mode(x: Tensor, k_star: np.ndarray) -> Tensor:
    """x [K, N, T_f, C] -> [N, T_f, C] at mode k_star[n]."""
    K, N, T, C = x.shape
    idx = np.broadcast_to(k_star.reshape(1, N, 1, 1), (1, N, T, C))
    return nc.reshape(nc.take_along_axis(x, idx, axis=0), (N, T, C))


def laplace_nll(mu: Tensor, b: Tensor, truth: np.ndarray, k_star: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean over supervised agents and steps of sum_xy [log(2b) + |y - mu| / b] at mode k*."""
    N, T_f = truth.shape[:2]
    mask = np.ones(N, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return nc.Tensor(np.zeros((), dtype=mu.dtype))
    if np.any(b.data <= 0):
        raise ValueError("Laplace scale must be positive")
    mu_k, b_k = _select_mode(mu, k_star), _select_mode(b, k_star)
    y = truth.astype(mu.dtype)
    per_axis = nc.add(nc.log(nc.scale(b_k, 2.0)), nc.div(nc.abs_(nc.sub(y, mu_k)), b_k))
    per_agent = nc.sum_(per_axis, axis=(1, 2))
    weights = mask.astype(mu.dtype) / (count * T_f)
    return nc.sum_(nc.mul(per_agent, weights))


def soft_targets(mu: np.ndarray, truth: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """softmax_k(-FDE_k / temperature) -> [N, K]."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    fde = np.linalg.norm(np.asarray(mu)[:, :, -1] - truth[None, :, -1], axis=-1).T  # [N, K]
    logits = -fde / temperature
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def classification_loss(pi: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """(1/N) sum_i sum_k -target_ik log(pi_ik), log clamped at 1e-12."""
    N = pi.shape[0]
    mask = np.ones(N, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return nc.Tensor(np.zeros((), dtype=pi.dtype))
    logp = nc.log(nc.clamp_min(pi, PROB_FLOOR))
    weights = (target * mask[:, None] / count).astype(pi.dtype)
    return nc.scale(nc.sum_(nc.mul(logp, weights)), -1.0)


def supervision_mask(batch: Batch, cfg: Config) -> np.ndarray:
    mask = batch.agent_valid & batch.has_future
    if cfg.supervise == "target":
        only = np.zeros_like(mask)
        only[np.arange(batch.size), batch.target] = True
        mask &= only
    return mask


def compute_loss(
    forecast: LaplaceMixtureForecast,
    batch: Batch,
    cfg: Config,
    k_star: np.ndarray | None = None,
    target: np.ndarray | None = None,
) -> LossBreakdown:
    """L = L_reg + L_cls over every supervised agent in the batch.

    The best mode and the soft classification targets are labels: they are
    computed from the detached forecast and carry no gradient. Passing
    ``k_star`` [B, N] or ``target`` [B, N, K] freezes them (used by gradient
    checks, where a perturbation must not move the labels).
    """
    if batch.future is None:
        raise ValueError("batch has no future labels")
    B, K, N, T_f, _ = forecast.mu.shape
    flat = lambda x: nc.reshape(nc.transpose(x, (1, 0, 2, 3, 4)), (K, B * N, T_f, 2))
    mu, b = flat(forecast.mu), flat(forecast.b)
    pi = nc.reshape(forecast.pi, (B * N, K))
    truth = batch.future.reshape(B * N, T_f, 2)
    mask = supervision_mask(batch, cfg).reshape(-1)
    k_star = best_mode(mu.data, truth) if k_star is None else np.maximum(np.asarray(k_star).reshape(-1), 0)
    target = soft_targets(mu.data, truth, cfg.soft_target_temperature) if target is None else np.asarray(target).reshape(B * N, K)
    reg = laplace_nll(mu, b, truth, k_star, mask)
    cls = classification_loss(pi, target, mask)
    return LossBreakdown(nc.add(reg, cls), reg, cls, np.where(mask, k_star, -1).reshape(B, N), target.reshape(B, N, K))


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamTree
    rows: list[dict] = field(default_factory=list)
    steps: int = 0
    best_val_minfde: float = math.inf


def save_model(params: ParamTree, cfg: Config, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nc.save_checkpoint(params, directory / "params.manifest", directory / "params.bin")
    write_resolved(cfg, directory / "resolved-config")
    return directory


def evaluate_scenes(
    scenes: Sequence[NormalizedScene], params: ParamTree, cfg: Config, batch_size: int | None = None
) -> dict[str, float]:
    """Eval-mode minADE / minFDE / MR over all agents with labels."""
    preds, truths = [], []
    batch_size = batch_size or cfg.batch
    with nc.no_grad():
        for start in range(0, len(scenes), batch_size):
            batch = collate(scenes[start : start + batch_size])
            fc = forward(batch, params, cfg, training=False).forecast
            mask = supervision_mask(batch, cfg)
            mu = np.transpose(fc.mu.data, (1, 0, 2, 3, 4)).astype(np.float64)  # [K, B, N, T, 2]
            preds.append(mu[:, mask])
            truths.append(batch.future[mask])
    pred = np.concatenate(preds, axis=1)
    truth = np.concatenate(truths, axis=0)
    return {
        "minade": min_ade(pred, truth, cfg.metric_mode),
        "minfde": min_fde(pred, truth, cfg.metric_mode),
        "mr": miss_rate(pred, truth, mode=cfg.metric_mode),
    }


def _format_row(row: dict) -> dict:
    out = {}
    for key in LOG_COLUMNS:
        value = row.get(key, "")
        if isinstance(value, float):
            value = "nan" if math.isnan(value) else repr(float(value))
        out[key] = value
    return out


def train(
    scenes: Sequence[Scene | NormalizedScene],
    cfg: Config,
    val_scenes: Sequence[Scene | NormalizedScene] = (),
    out_dir: str | Path | None = None,
    params: ParamTree | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minibatch AdamW with cosine-annealed learning rate.

    Writes ``train_log.csv``, ``checkpoint/`` (latest) and ``best/`` (lowest
    validation minFDE) under ``out_dir`` when given. On a non-finite loss the
    last good parameters are saved and :class:`TrainingDiverged` is raised.
    """
    if not scenes:
        raise ConfigError("training set is empty")
    train_set = [s if isinstance(s, NormalizedScene) else normalize(s) for s in scenes]
    val_set = [s if isinstance(s, NormalizedScene) else normalize(s) for s in val_scenes]
    params = params or init_params(cfg)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch)
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch
    state = AdamState()
    result = TrainResult(params)

    out = Path(out_dir) if out_dir else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out / "resolved-config")
        log_file = open(out / "train_log.csv", "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(log_file, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()

    step = 0
    epoch = 0
    try:
        while step < total_steps:
            epoch += 1
            order = rng.permutation(len(train_set))
            sums = np.zeros(3)
            batches = 0
            for start in range(0, len(order), cfg.batch):
                if step >= total_steps:
                    break
                batch = collate([train_set[i] for i in order[start : start + cfg.batch]])
                lr = nc.cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
                params.zero_grad()
                try:
                    fc = forward(batch, params, cfg, training=True, rng=rng).forecast
                    losses = compute_loss(fc, batch, cfg)
                    if not np.isfinite(losses.total.data):
                        raise NumericError("non-finite loss")
                    losses.total.backward()
                    grads = params.grads()
                    if not all(np.isfinite(g).all() for g in grads.values()):
                        raise NumericError("non-finite gradient")
                except NumericError as exc:
                    if out is not None:
                        save_model(params, cfg, out / "checkpoint")
                    raise TrainingDiverged(f"step {step}: {exc}") from exc
                if cfg.grad_clip > 0:
                    nc.clip_grad_norm(grads, cfg.grad_clip)
                nc.adamw_step(params, grads, state, lr, weight_decay=cfg.weight_decay)
                sums += [float(losses.total.data), float(losses.reg.data), float(losses.cls.data)]
                batches += 1
                step += 1
            row = {
                "epoch": epoch,
                "step": step,
                "lr": nc.cosine_lr(min(step, total_steps), total_steps, cfg.lr, cfg.lr_min),
                "loss": sums[0] / batches,
                "loss_reg": sums[1] / batches,
                "loss_cls": sums[2] / batches,
                "val_minade": math.nan,
                "val_minfde": math.nan,
                "val_mr": math.nan,
            }
            if val_set:
                metrics = evaluate_scenes(val_set, params, cfg)
                row.update(val_minade=metrics["minade"], val_minfde=metrics["minfde"], val_mr=metrics["mr"])
                if metrics["minfde"] < result.best_val_minfde:
                    result.best_val_minfde = metrics["minfde"]
                    if out is not None:
                        save_model(params, cfg, out / "best")
            result.rows.append(row)
            if writer is not None:
                writer.writerow(_format_row(row))
                log_file.flush()
            if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_model(params, cfg, out / "checkpoint")
            if on_epoch is not None:
                on_epoch(row)
            log.info("epoch %d step %d loss %.4f reg %.4f cls %.4f", epoch, step, row["loss"], row["loss_reg"], row["loss_cls"])
    finally:
        if writer is not None:
            log_file.close()
    if out is not None:
        save_model(params, cfg, out / "checkpoint")
    result.steps = step
    return result


def load_model(directory: str | Path, cfg: Config | None = None) -> tuple[ParamTree, Config]:
    """Load ``params.manifest``/``params.bin`` and check them against the model shape for ``cfg``.

    ``cfg`` defaults to the ``resolved-config`` saved next to the parameters.
    """
    directory = Path(directory)
    manifest = directory / "params.manifest"
    if not manifest.exists():
        raise CheckpointError(f"no checkpoint at {directory} (missing {manifest.name})")
    if cfg is None:
        resolved = directory / "resolved-config"
        cfg = load_config(resolved if resolved.exists() else None)
    params = nc.load_checkpoint(manifest, directory / "params.bin")
    expected = init_params(cfg)
    for name in expected.names():
        if name not in params:
            raise CheckpointError(f"checkpoint is missing parameter {name} {expected[name].shape}")
        if params[name].shape != expected[name].shape:
            raise CheckpointError(
                f"parameter {name} has shape {params[name].shape} in checkpoint but {expected[name].shape} for this config"
            )
    extra = [n for n in params.names() if n not in expected]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]}")
    return params.astype(cfg.dtype), cfg
