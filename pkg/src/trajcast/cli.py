"""``trajcast`` command line: gen, train, predict, eval, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import FIELD_TYPES, Config, load_config, write_resolved
from .errors import ConfigError, NumericError, TrajcastError

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2
THREADS_ENV = "TRAJCAST_THREADS"

log = logging.getLogger("trajcast")


class UsageError(TrajcastError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_agents(text: str) -> tuple[int, int]:
    """``2..8`` -> (2, 8); a single number means exactly that many."""
    lo, sep, hi = text.partition("..")
    try:
        pair = (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO..HI, got {text!r}") from None
    if pair[0] < 1 or pair[0] > pair[1]:
        raise argparse.ArgumentTypeError(f"invalid agent range {text!r}")
    return pair


def parse_int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def parse_set(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajcast", description="Map-free multi-agent trajectory forecasting at desk scale.")
    parser.add_argument("--threads", type=int, default=None, help=f"cap on BLAS threads (default ${THREADS_ENV} or 1; 1 is deterministic)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="generate a synthetic scene file")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--scenes", type=int, default=100, help="number of scenes")
    gen.add_argument("--agents", type=parse_agents, default=(1, 8), help="agents per scene, N or LO..HI (default 1..8)")
    gen.add_argument("--mix", default="", help="motion primitive weights, e.g. constant_velocity:2,turn_left:1")
    gen.add_argument("--noise", type=float, default=0.03, help="history observation noise std in metres")
    gen.add_argument("--late-prob", type=float, default=0.2, help="probability a non-target agent appears late")
    gen.add_argument("--out", required=True, help="output JSONL scene file")

    config_help = "key=value config file; see `trajcast train --print-config`"
    train = sub.add_parser("train", help="train a model")
    train.add_argument("--config", help=config_help)
    train.add_argument("--data", help="training scene file")
    train.add_argument("--val", help="validation scene file")
    train.add_argument("--out", help="output directory for checkpoint, best model and train_log.csv")
    train.add_argument("--epochs", type=int)
    train.add_argument("--max-steps", type=int, dest="max_steps")
    train.add_argument("--batch", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--metric-mode", choices=("per-agent", "paper-literal"), dest="metric_mode")
    train.add_argument("--set", type=parse_set, action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    train.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    pred = sub.add_parser("predict", help="write global-frame forecasts for a scene file")
    pred.add_argument("--checkpoint", required=True, help="checkpoint directory (params.manifest, params.bin, resolved-config)")
    pred.add_argument("--data", required=True, help="scene file")
    pred.add_argument("--out", required=True, help="prediction JSONL file")
    pred.add_argument("--config", help="override the checkpoint's resolved-config")
    pred.add_argument("--batch", type=int, default=32)

    ev = sub.add_parser("eval", help="score a prediction file against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True, help="scene file with futures")
    ev.add_argument("--metric-mode", choices=("per-agent", "paper-literal"), default="per-agent")
    ev.add_argument("--out", help="metrics CSV path (always echoed to stdout)")

    bench = sub.add_parser("bench", help="latency benchmark over an (S, T) grid")
    bench.add_argument("--checkpoint", help="checkpoint directory; random weights at the default config otherwise")
    bench.add_argument("--config", help=config_help)
    bench.add_argument("--grid", type=parse_int_list, default=[8, 16, 32, 64], help="values used for both S and T (default 8,16,32,64)")
    bench.add_argument("--S", type=parse_int_list, dest="S_list", help="agent counts (overrides --grid)")
    bench.add_argument("--T", type=parse_int_list, dest="T_list", help="history lengths (overrides --grid)")
    bench.add_argument("--kernels", default="joint,factorized,model", help="comma-separated subset of joint,factorized,model")
    bench.add_argument("--reps", type=int, default=30, help="timed iterations per point (minimum 30)")
    bench.add_argument("--warmup", type=int, default=5, help="warm-up iterations per point (minimum 5)")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", required=True, help="output directory for bench.csv, fits.txt and SVG plots")
    return parser


def _record(path: Path, args: argparse.Namespace, threads: int) -> None:
    """key=value echo of a non-training command's resolved arguments."""
    lines = [f"command={args.command}", f"threads={threads}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "threads", "verbose"):
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={'' if value is None else value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"missing {what} path")
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return path


def cmd_gen(args, threads: int) -> int:
    from .scene import generate_synthetic, parse_mix, write_scene_file

    scenes = generate_synthetic(
        args.seed,
        args.scenes,
        n_agents_range=args.agents,
        motion_mix=parse_mix(args.mix) if args.mix else None,
        noise_std=args.noise,
        late_appearance_prob=args.late_prob,
    )
    out = Path(args.out)
    try:
        write_scene_file(out, scenes)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from None
    _record(out.with_name(out.name + ".resolved-config"), args, threads)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def train_config(args) -> Config:
    overrides = {k: getattr(args, k) for k in ("data", "val", "out", "epochs", "max_steps", "batch", "lr", "seed", "metric_mode")}
    for key, value in args.set:
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key}")
        overrides[key] = value
    return load_config(args.config, overrides)


def cmd_train(args, threads: int) -> int:
    from .scene import parse_scene_file
    from .training import TrainingDiverged, train

    cfg = train_config(args).replace(threads=threads)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return EXIT_OK
    data = _require_file(cfg.data, "training data")
    val = _require_file(cfg.val, "validation data") if cfg.val else None
    if not cfg.out:
        raise UsageError("missing output directory (--out)")
    scenes = parse_scene_file(data, cfg.T_h, cfg.T_f)
    val_scenes = parse_scene_file(val, cfg.T_h, cfg.T_f) if val else []
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved-config")
    print(cfg.to_text(), end="")

    def report(row):
        val_part = ""
        if val_scenes:
            val_part = f" val_minade={row['val_minade']:.4f} val_minfde={row['val_minfde']:.4f} val_mr={row['val_mr']:.4f}"
        print(f"epoch={row['epoch']} step={row['step']} lr={row['lr']:.3g} loss={row['loss']:.4f}{val_part}", flush=True)

    try:
        train(scenes, cfg, val_scenes, out, on_epoch=report)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good parameters saved in {out / 'checkpoint'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"checkpoint written to {out / 'checkpoint'}")
    return EXIT_OK


def cmd_predict(args, threads: int) -> int:
    from .decoder import prediction_records, write_predictions
    from .model import collate, predict_global
    from .scene import normalize, parse_scene_file
    from .training import load_model

    cfg = load_config(args.config).replace(threads=threads) if args.config else None
    params, cfg = load_model(args.checkpoint, cfg)
    data = _require_file(args.data, "scene")
    scenes = [normalize(s) for s in parse_scene_file(data, cfg.T_h, cfg.T_f)]
    records = []
    for start in range(0, len(scenes), args.batch):
        batch = collate(scenes[start : start + args.batch])
        for scene, mu, _b, pi in predict_global(batch, params, cfg):
            records.extend(prediction_records(scene.scene_id, scene.agent_ids, mu, pi))
    out = Path(args.out)
    write_predictions(out, records)
    _record(out.with_name(out.name + ".resolved-config"), args, threads)
    print(f"wrote {len(records)} agent forecasts to {out}")
    return EXIT_OK


def cmd_eval(args, threads: int) -> int:
    from .evaluation import METRICS_COLUMNS, score_files

    _require_file(args.pred, "prediction")
    _require_file(args.truth, "truth")
    report = score_files(args.pred, args.truth, args.metric_mode, args.out)
    row = report.csv_row()
    print(",".join(METRICS_COLUMNS))
    print(",".join(str(row[c]) for c in METRICS_COLUMNS))
    if args.out:
        _record(Path(args.out + ".resolved-config"), args, threads)
    return EXIT_OK


def cmd_bench(args, threads: int) -> int:
    from .bench import KERNELS, bench, write_bench_csv, write_bench_plots
    from .training import load_model

    kernels = [k.strip() for k in args.kernels.split(",") if k.strip()]
    bad = [k for k in kernels if k not in KERNELS]
    if bad:
        raise UsageError(f"unknown kernel {bad[0]!r}; choose from {','.join(KERNELS)}")
    cfg = load_config(args.config) if args.config else None
    if args.checkpoint:
        params, cfg = load_model(args.checkpoint, cfg)
    else:
        cfg = cfg or Config()
        params = None
    cfg = cfg.replace(threads=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    S_list = args.S_list or args.grid
    T_list = args.T_list or args.grid

    def progress(t):
        print(f"{t.kernel} S={t.S} T={t.T} median={t.median_ms:.3f} ms", flush=True)

    report = bench(cfg, S_list, T_list, args.reps, args.warmup, params, kernels, args.seed, progress)
    write_bench_csv(report, out / "bench.csv")
    write_bench_plots(report, out)
    with open(out / "fits.txt", "w", encoding="utf-8") as fh:
        for kernel, fit in sorted(report.fits.items()):
            for key, value in sorted(fit.items()):
                fh.write(f"{kernel}.{key}={value}\n")
    _record(out / "resolved-config", args, threads)
    print(f"bench results in {out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error; keep main() returning codes
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise UsageError(f"--threads must be at least 1, got {threads}")
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, threads)
    except NumericError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TrajcastError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
