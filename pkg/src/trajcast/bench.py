"""Latency benchmark: full-model inference, factorized interaction stack, joint attention reference."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .config import Config
from .interaction import edge_inputs, neighbor_mask, spatial_interact, temporal_interact
from .model import collate, forward, init_params
from .numcore import ParamTree
from .scene import generate_synthetic, normalize

BENCH_COLUMNS = ["kernel", "S", "T", "mean_ms", "median_ms", "p95_ms"]
KERNELS = ("joint", "factorized", "model")
MIN_WARMUP = 5
MIN_REPS = 30
# a single timed sample shorter than this is considered below timer resolution
MIN_SAMPLE_S = 1e-3


@dataclass
class Timing:
    kernel: str
    S: int
    T: int
    samples_ms: np.ndarray
    calls_per_sample: int = 1

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))


@dataclass
class BenchReport:
    timings: list[Timing]
    hidden: int
    threads: int = 1
    fits: dict = field(default_factory=dict)

    def rows(self, kernel: str | None = None) -> list[Timing]:
        return [t for t in self.timings if kernel is None or t.kernel == kernel]

    def median(self, kernel: str, S: int, T: int) -> float:
        for t in self.timings:
            if (t.kernel, t.S, t.T) == (kernel, S, T):
                return t.median_ms
        raise KeyError((kernel, S, T))


def time_callable(fn: Callable[[], object], repetitions: int = MIN_REPS, warmup: int = MIN_WARMUP) -> tuple[np.ndarray, int]:
    """Per-call wall-clock samples in ms.

    When one call is shorter than the timer can resolve reliably, each sample
    covers several back-to-back calls and is divided by that count.
    """
    repetitions = max(repetitions, MIN_REPS)
    warmup = max(warmup, MIN_WARMUP)
    for _ in range(warmup):
        fn()
    calls = 1
    while True:
        start = time.perf_counter()
        for _ in range(calls):
            fn()
        if time.perf_counter() - start >= MIN_SAMPLE_S or calls >= 1 << 16:
            break
        calls *= 4
    samples = np.empty(repetitions)
    for i in range(repetitions):
        start = time.perf_counter()
        for _ in range(calls):
            fn()
        samples[i] = (time.perf_counter() - start) * 1e3 / calls
    return samples, calls


# -- kernels -------------------------------------------------------------------

def _np_layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def joint_attention(X: np.ndarray, p: ParamTree, cfg: Config, prefix: str = "interaction.temporal") -> np.ndarray:
    """Reference joint spatiotemporal attention over all S*T tokens.

    Same block structure and depth as the temporal stack (pre-norm MHA and
    FFN with residuals), but every token attends to every other token, so each
    layer costs O((S*T)^2). Heads are processed one at a time to bound memory.
    """
    S, T, H = X.shape
    x = X.reshape(S * T, H)
    heads = cfg.heads
    d = H // heads
    w = lambda name: p[name].data

    def lin(z, name):
        out = z @ w(f"{name}.weight")
        return out + w(f"{name}.bias") if f"{name}.bias" in p else out

    for layer in range(cfg.temporal_layers):
        name = f"{prefix}.{layer}"
        h = _np_layer_norm(x, w(f"{name}.norm1.gamma"), w(f"{name}.norm1.beta"))
        q = lin(h, f"{name}.q")
        k = lin(h, f"{name}.k")
        v = lin(h, f"{name}.v")
        merged = np.empty_like(q)
        for h in range(heads):
            cols = slice(h * d, (h + 1) * d)
            logits = q[:, cols] @ k[:, cols].T
            logits *= 1.0 / math.sqrt(d)
            logits -= logits.max(axis=1, keepdims=True)
            np.exp(logits, out=logits)
            logits /= logits.sum(axis=1, keepdims=True)
            merged[:, cols] = logits @ v[:, cols]
        x = x + lin(merged, f"{name}.out")
        h = _np_layer_norm(x, w(f"{name}.norm2.gamma"), w(f"{name}.norm2.beta"))
        x = x + lin(np.maximum(lin(h, f"{name}.ffn.fc1"), 0.0), f"{name}.ffn.fc2")
    return x.reshape(S, T, H)


def _bench_scene(S: int, T: int, cfg: Config, seed: int):
    scene = generate_synthetic(seed, 1, n_agents_range=(S, S), late_appearance_prob=0.0, dt=cfg.dt, T_h=T, T_f=cfg.T_f)[0]
    return scene


def make_kernels(S: int, T: int, params: ParamTree, cfg: Config, seed: int = 0) -> dict[str, Callable[[], object]]:
    """Zero-argument callables for each benchmarked kernel at grid point (S, T)."""
    rng = np.random.default_rng(seed)
    H = cfg.hidden
    cfg_t = cfg.replace(T_h=T)
    X = rng.standard_normal((1, S, T, H)).astype(cfg.dtype)
    valid = np.ones((1, S, T), dtype=bool)
    scene = _bench_scene(S, T, cfg_t, seed)
    batch = collate([normalize(scene)])
    edges = edge_inputs(batch.rel_offset, batch.rel_heading, cfg.dtype)
    neighbors = neighbor_mask(batch.agent_valid, batch.rel_offset, cfg.neighbor_radius)
    Xt = nc.Tensor(X)
    F = nc.Tensor(X[:, :, -1])

    def factorized():
        with nc.no_grad():
            spatial_interact(F, edges, neighbors, params, cfg_t)
            temporal_interact(Xt, valid, params, cfg_t)

    def joint():
        joint_attention(X[0], params, cfg_t)

    def model():
        # normalize + encode + interact + decode for one scene, no file I/O
        with nc.no_grad():
            forward(collate([normalize(scene)]), params, cfg_t, training=False)

    return {"joint": joint, "factorized": factorized, "model": model}


# -- fits ----------------------------------------------------------------------

def loglog_exponent(xs: Sequence[float], ys: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)
    return float(slope)


def quadratic_fit(S: Sequence[float], T: Sequence[float], y: Sequence[float]) -> dict:
    """Least-squares y ~ a + b*S^2 + c*T^2; returns coefficients and R^2."""
    S, T, y = (np.asarray(v, float) for v in (S, T, y))
    A = np.stack([np.ones_like(S), S**2, T**2], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return {"a": float(coef[0]), "b": float(coef[1]), "c": float(coef[2]), "r2": r2}


def token_fit(S: Sequence[float], T: Sequence[float], y: Sequence[float]) -> dict:
    """Diagnostic fit y ~ a + b*S*T + c*S*T^2 + d*S^2 for a per-scene factorized stack.

    Token-wise projections and FFNs cost S*T, temporal attention over each of
    the S agents costs S*T^2 and spatial attention costs S^2.
    """
    S, T, y = (np.asarray(v, float) for v in (S, T, y))
    A = np.stack([np.ones_like(S), S * T, S * T**2, S**2], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return {"coef": [float(c) for c in coef], "r2": r2}


def fit_report(report: BenchReport) -> dict:
    fits = {}
    for kernel in {t.kernel for t in report.timings}:
        rows = report.rows(kernel)
        S_vals = sorted({t.S for t in rows})
        T_vals = sorted({t.T for t in rows})
        entry = {}
        if len(T_vals) > 1:
            s_fix = S_vals[-1]
            pts = sorted((t.T, t.median_ms) for t in rows if t.S == s_fix)
            entry["exp_T"] = loglog_exponent(*zip(*pts))
            entry["S_fixed"] = s_fix
        if len(S_vals) > 1:
            t_fix = T_vals[-1]
            pts = sorted((t.S, t.median_ms) for t in rows if t.T == t_fix)
            entry["exp_S"] = loglog_exponent(*zip(*pts))
            entry["T_fixed"] = t_fix
        if len(rows) >= 3:
            cols = [t.S for t in rows], [t.T for t in rows], [t.median_ms for t in rows]
            entry["quadratic"] = quadratic_fit(*cols)
            if len(rows) >= 4:
                entry["token"] = token_fit(*cols)
        fits[kernel] = entry
    return fits


# -- driver --------------------------------------------------------------------

def bench(
    cfg: Config,
    S_list: Sequence[int] = (8, 16, 32, 64),
    T_list: Sequence[int] = (8, 16, 32, 64),
    repetitions: int = MIN_REPS,
    warmup: int = MIN_WARMUP,
    params: ParamTree | None = None,
    kernels: Sequence[str] = KERNELS,
    seed: int = 0,
    progress: Callable[[Timing], None] | None = None,
) -> BenchReport:
    """Time each kernel on every (S, T) grid point in eval mode and fit scaling models."""
    unknown = set(kernels) - set(KERNELS)
    if unknown:
        raise ValueError(f"unknown kernels: {sorted(unknown)}")
    params = params if params is not None else init_params(cfg, seed)
    timings = []
    for S in S_list:
        for T in T_list:
            fns = make_kernels(S, T, params, cfg, seed)
            for kernel in kernels:
                samples, calls = time_callable(fns[kernel], repetitions, warmup)
                timing = Timing(kernel, S, T, samples, calls)
                timings.append(timing)
                if progress is not None:
                    progress(timing)
    report = BenchReport(timings, cfg.hidden, threads=cfg.threads)
    report.fits = fit_report(report)
    return report


def write_bench_csv(report: BenchReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# single worker, threads={report.threads}, hidden={report.hidden}, times are per call in ms\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        for t in report.timings:
            writer.writerow([t.kernel, t.S, t.T, f"{t.mean_ms:.6g}", f"{t.median_ms:.6g}", f"{t.p95_ms:.6g}"])


def read_bench_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# -- SVG plots -----------------------------------------------------------------

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def svg_line_plot(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str, width: int = 520, height: int = 360) -> str:
    """Log-log line plot of named (x, y) series as a standalone SVG document."""
    left, right, top, bottom = 70, 130, 40, 50
    pts = [pt for s in series.values() for pt in s if pt[0] > 0 and pt[1] > 0]
    if not pts:
        pts = [(1.0, 1.0), (10.0, 10.0)]
    lx = np.log10([p[0] for p in pts])
    ly = np.log10([p[1] for p in pts])
    x0, x1 = lx.min(), max(lx.max(), lx.min() + 1e-9)
    y0, y1 = ly.min(), max(ly.max(), ly.min() + 1e-9)
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (math.log10(x) - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (math.log10(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {top + ph / 2:.1f})">{_esc(ylabel)}</text>',
    ]
    xticks = sorted({p[0] for p in pts})
    for x in xticks:
        out.append(f'<text x="{sx(x):.1f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{x:g}</text>')
    for y in (10**y0, 10 ** ((y0 + y1) / 2), 10**y1):
        out.append(f'<text x="{left - 6}" y="{sy(y) + 3:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.3g}</text>')
    for i, (name, s) in enumerate(sorted(series.items())):
        color = _COLORS[i % len(_COLORS)]
        s = sorted(pt for pt in s if pt[0] > 0 and pt[1] > 0)
        if s:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            for x, y in s:
                out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly_ = top + 14 + 16 * i
        out.append(f'<line x1="{width - right + 10}" y1="{ly_}" x2="{width - right + 30}" y2="{ly_}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 34}" y="{ly_ + 4}" font-family="sans-serif" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_bench_plots(report: BenchReport, out_dir: str | Path) -> list[Path]:
    """latency_vs_T.svg (largest S fixed) and latency_vs_S.svg (largest T fixed)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    S_max = max(t.S for t in report.timings)
    T_max = max(t.T for t in report.timings)
    kernels = sorted({t.kernel for t in report.timings})
    by_T = {k: [(t.T, t.median_ms) for t in report.rows(k) if t.S == S_max] for k in kernels}
    by_S = {k: [(t.S, t.median_ms) for t in report.rows(k) if t.T == T_max] for k in kernels}
    paths = [out_dir / "latency_vs_T.svg", out_dir / "latency_vs_S.svg"]
    paths[0].write_text(svg_line_plot(by_T, f"Median latency vs T (S={S_max})", "T (history steps)", "ms"), encoding="utf-8")
    paths[1].write_text(svg_line_plot(by_S, f"Median latency vs S (T={T_max})", "S (agents)", "ms"), encoding="utf-8")
    return paths
