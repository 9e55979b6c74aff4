"""Displacement metrics and prediction-file scoring."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .decoder import read_predictions
from .errors import SchemaError
from .scene import Scene, parse_scene_file

METRIC_MODES = ("per-agent", "paper-literal")
MISS_THRESHOLD = 2.0
METRICS_COLUMNS = ["scene_count", "agent_count", "K", "minade", "minfde", "mr", "metric_mode"]


def _distances(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 4 or pred.shape[1:] != truth.shape or truth.shape[-1] != 2:
        raise ValueError(f"prediction {pred.shape} must be [K, N, T_f, 2] matching truth {truth.shape}")
    if truth.shape[1] == 0:
        raise ValueError("metrics are undefined for T_f = 0")
    return np.linalg.norm(pred - truth[None], axis=-1)  # [K, N, T_f]


def _check_mode(mode: str) -> None:
    if mode not in METRIC_MODES:
        raise ValueError(f"metric mode must be one of {METRIC_MODES}, got {mode!r}")


def min_ade(pred: np.ndarray, truth: np.ndarray, mode: str = "per-agent") -> float:
    """Best-of-K average displacement error.

    ``per-agent`` picks the best mode separately for each agent;
    ``paper-literal`` picks one mode minimising the error summed over agents.
    """
    _check_mode(mode)
    dist = _distances(pred, truth)
    K, N, T = dist.shape
    if N == 0:
        return 0.0
    if mode == "per-agent":
        return float(dist.mean(axis=2).min(axis=0).mean())
    return float(dist.sum(axis=(1, 2)).min() / (N * T))


def min_fde(pred: np.ndarray, truth: np.ndarray, mode: str = "per-agent") -> float:
    _check_mode(mode)
    final = _distances(pred, truth)[:, :, -1]
    N = final.shape[1]
    if N == 0:
        return 0.0
    if mode == "per-agent":
        return float(final.min(axis=0).mean())
    return float(final.sum(axis=1).min() / N)


def miss_rate(pred: np.ndarray, truth: np.ndarray, threshold: float = MISS_THRESHOLD, mode: str = "per-agent") -> float:
    """Fraction of agents whose best endpoint error is >= ``threshold`` metres."""
    _check_mode(mode)
    final = _distances(pred, truth)[:, :, -1]
    if final.shape[1] == 0:
        return 0.0
    if mode == "per-agent":
        best = final.min(axis=0)
    else:
        best = final[np.argmin(final.sum(axis=1))]
    return float(np.mean(best >= threshold))


@dataclass
class MetricReport:
    minADE: float
    minFDE: float
    MR: float
    n_agents: int
    K: int
    n_scenes: int = 0
    metric_mode: str = "per-agent"

    def csv_row(self) -> dict:
        return {
            "scene_count": self.n_scenes,
            "agent_count": self.n_agents,
            "K": self.K,
            "minade": repr(float(self.minADE)),
            "minfde": repr(float(self.minFDE)),
            "mr": repr(float(self.MR)),
            "metric_mode": self.metric_mode,
        }


def compute_report(pred: np.ndarray, truth: np.ndarray, mode: str = "per-agent", n_scenes: int = 0) -> MetricReport:
    return MetricReport(
        minADE=min_ade(pred, truth, mode),
        minFDE=min_fde(pred, truth, mode),
        MR=miss_rate(pred, truth, mode=mode),
        n_agents=int(np.asarray(truth).shape[0]),
        K=int(np.asarray(pred).shape[0]),
        n_scenes=n_scenes,
        metric_mode=mode,
    )


def truth_table(scenes: Iterable[Scene]) -> dict[tuple[str, str], np.ndarray]:
    """(scene_id, agent_id) -> global future [T_f, 2] for every labelled agent observed at t=0."""
    table = {}
    for scene in scenes:
        for agent in scene.agents:
            if agent.future is not None and agent.valid[-1]:
                table[(scene.scene_id, agent.agent_id)] = agent.future
    return table


def score_files(
    pred_file: str | Path,
    truth_file: str | Path,
    mode: str = "per-agent",
    out_csv: str | Path | None = None,
    T_h: int = 20,
    T_f: int = 30,
) -> MetricReport:
    """Join predictions to ground truth by (scene_id, agent_id) and score them."""
    _check_mode(mode)
    truths = truth_table(parse_scene_file(truth_file, T_h, T_f))
    preds = {}
    for p in read_predictions(pred_file):
        key = (p.scene_id, p.agent_id)
        if key in preds:
            raise SchemaError(f"duplicate prediction for scene {key[0]!r} agent {key[1]!r}")
        preds[key] = p
    missing = sorted(set(truths) - set(preds))
    extra = sorted(set(preds) - set(truths))
    if missing or extra:
        lines = [f"missing prediction: scene {s!r} agent {a!r}" for s, a in missing]
        lines += [f"no ground truth: scene {s!r} agent {a!r}" for s, a in extra]
        raise SchemaError("\n".join(lines))
    keys = sorted(truths)
    ks = {preds[k].traj.shape[0] for k in keys}
    if len(ks) > 1:
        by_k = defaultdict(list)
        for k in keys:
            by_k[preds[k].traj.shape[0]].append(k[0])
        raise SchemaError(f"mismatched mode counts across scenes: {dict((n, sorted(set(v))[:3]) for n, v in by_k.items())}")
    if keys:
        pred = np.stack([preds[k].traj for k in keys], axis=1)
        truth = np.stack([truths[k] for k in keys], axis=0)
        report = compute_report(pred, truth, mode, n_scenes=len({k[0] for k in keys}))
    else:
        report = MetricReport(0.0, 0.0, 0.0, 0, 0, 0, mode)
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerow(report.csv_row())
    return report


from .bench import BenchReport, bench  # noqa: E402  (re-exported harness)
