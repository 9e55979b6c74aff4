"""Run configuration: defaults, key=value files, resolved-config echo."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError


@dataclass
class Config:
    # architecture
    hidden: int = 128
    heads: int = 8
    lstm_layers: int = 2
    spatial_layers: int = 3
    temporal_layers: int = 4
    ffn_hidden: int = 256
    K: int = 6
    T_h: int = 20
    T_f: int = 30
    dt: float = 0.1
    dropout: float = 0.1
    neighbor_radius: float = math.inf
    encoder_attention: bool = True
    spatial_interaction: bool = True
    temporal_interaction: bool = True
    interaction_residual: bool = True
    cumulative_offsets: bool = True
    precision: str = "f32"
    # optimization
    batch: int = 32
    lr: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 64
    lr_min: float = 0.0
    grad_clip: float = 5.0
    soft_target_temperature: float = 1.0
    supervise: str = "all"
    seed: int = 0
    max_steps: int = 0
    checkpoint_every: int = 0
    # paths and runtime
    data: str = ""
    val: str = ""
    out: str = ""
    checkpoint: str = ""
    threads: int = 1
    metric_mode: str = "per-agent"

    def validate(self) -> "Config":
        positive = ("hidden", "heads", "lstm_layers", "ffn_hidden", "K", "T_h", "T_f", "batch", "epochs", "threads")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("spatial_layers", "temporal_layers", "max_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dt <= 0 or self.lr <= 0 or self.soft_target_temperature <= 0:
            raise ConfigError("dt, lr and soft_target_temperature must be positive")
        if self.lr_min < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("lr_min, weight_decay and grad_clip must be non-negative")
        if self.neighbor_radius <= 0:
            raise ConfigError(f"neighbor_radius must be positive, got {self.neighbor_radius}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.supervise not in ("all", "target"):
            raise ConfigError(f"supervise must be 'all' or 'target', got {self.supervise!r}")
        if self.metric_mode not in ("per-agent", "paper-literal"):
            raise ConfigError(f"metric_mode must be 'per-agent' or 'paper-literal', got {self.metric_mode!r}")
        return self

    @property
    def dtype(self):
        import numpy as np

        return np.float32 if self.precision == "f32" else np.float64

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))


FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def _coerce(key: str, raw: Any) -> Any:
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return text


def build_config(values: Mapping[str, Any] | None = None) -> Config:
    """Defaults overridden by ``values``; unknown keys are rejected."""
    values = dict(values or {})
    unknown = sorted(set(values) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    return Config(**{k: _coerce(k, v) for k, v in values.items()}).validate()


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = value.strip()
    return values


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> Config:
    values: dict[str, Any] = {}
    if path:
        try:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


def write_resolved(config: Config, path: str | Path) -> None:
    Path(path).write_text(config.to_text(), encoding="utf-8")
