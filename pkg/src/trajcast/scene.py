"""Scene schema, JSON Lines I/O, agent-centric normalization, synthetic scenes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError

DEFAULT_DT = 0.1
DEFAULT_T_H = 20
DEFAULT_T_F = 30
DEGENERATE_HEADING_NORM = 1e-6

MAX_AGENTS = 128

MOTION_PRIMITIVES = (
    "constant_velocity",
    "turn_left",
    "turn_right",
    "accelerate",
    "brake",
    "lane_change",
)


@dataclass
class AgentTrack:
    agent_id: str
    history: np.ndarray  # [T_h, 3] of (x, y, valid)
    future: np.ndarray | None = None  # [T_f, 2]

    @property
    def valid(self) -> np.ndarray:
        return self.history[:, 2] > 0.5


@dataclass
class Scene:
    scene_id: str
    agents: list[AgentTrack]
    target_index: int = 0
    dt: float = DEFAULT_DT
    T_h: int = DEFAULT_T_H
    T_f: int = DEFAULT_T_F

    def validate(self) -> None:
        if not self.agents:
            raise SchemaError(f"scene {self.scene_id!r}: no agents")
        if not 0 <= self.target_index < len(self.agents):
            raise SchemaError(f"scene {self.scene_id!r}: target index {self.target_index} out of range")
        for agent in self.agents:
            if agent.history.shape != (self.T_h, 3):
                raise SchemaError(
                    f"scene {self.scene_id!r} agent {agent.agent_id!r}: expected T_h={self.T_h} "
                    f"history entries, got {agent.history.shape[0]}"
                )
            flags = agent.history[:, 2]
            if not np.all((flags == 0) | (flags == 1)):
                raise SchemaError(f"scene {self.scene_id!r} agent {agent.agent_id!r}: valid flags must be 0 or 1")
            if agent.future is not None and agent.future.shape != (self.T_f, 2):
                raise SchemaError(
                    f"scene {self.scene_id!r} agent {agent.agent_id!r}: expected T_f={self.T_f} "
                    f"future entries, got {agent.future.shape[0]}"
                )
        if not self.agents[self.target_index].valid[-1]:
            raise SchemaError(f"scene {self.scene_id!r}: target agent is not observed at t=0")


@dataclass
class NormalizedScene:
    """Per-agent local-frame features for the agents observed at t=0."""

    scene_id: str
    agent_ids: list[str]
    target_index: int
    features: np.ndarray  # R: [N, T_h, 3] of (dx, dy, flag) in each agent's frame
    valid_mask: np.ndarray  # [N, T_h] bool
    origins: np.ndarray  # [N, 2] global position at t=0
    headings: np.ndarray  # [N] radians
    rel_offset: np.ndarray  # [N, N, 2]: origin_j - origin_i, in frame i
    rel_heading: np.ndarray  # [N, N]: heading_j - heading_i wrapped to (-pi, pi]
    future_local: np.ndarray | None = None  # [N, T_f, 2]
    has_future: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    dt: float = DEFAULT_DT

    @property
    def num_agents(self) -> int:
        return self.features.shape[0]


# -- geometry ------------------------------------------------------------------

def rotate(vectors: np.ndarray, theta) -> np.ndarray:
    """Rotate ``vectors[..., 2]`` by ``theta`` (broadcast over leading axes)."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    x, y = vectors[..., 0], vectors[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], -1)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def to_local(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    return rotate(points - origin, -heading)


def to_global_points(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    return rotate(points, heading) + origin


# -- normalization -------------------------------------------------------------

def _displacements(history: np.ndarray) -> np.ndarray:
    """Global offsets from the previous valid step; zero where undefined."""
    valid = history[:, 2] > 0.5
    steps = np.arange(len(history))
    last_seen = np.maximum.accumulate(np.where(valid, steps, -1))
    prev = np.concatenate([[-1], last_seen[:-1]])
    ok = valid & (prev >= 0)
    out = np.zeros((len(history), 2))
    out[ok] = history[ok, :2] - history[prev[ok], :2]
    return out


def normalize(scene: Scene) -> NormalizedScene:
    scene.validate()
    keep = [i for i, a in enumerate(scene.agents) if a.valid[-1]]
    agents = [scene.agents[i] for i in keep]
    n, T_h = len(agents), scene.T_h

    features = np.zeros((n, T_h, 3))
    origins = np.zeros((n, 2))
    headings = np.zeros(n)
    valid_mask = np.zeros((n, T_h), dtype=bool)
    for i, agent in enumerate(agents):
        disp = _displacements(agent.history)
        ref = disp[-1]
        theta = math.atan2(ref[1], ref[0]) if np.hypot(*ref) >= DEGENERATE_HEADING_NORM else 0.0
        valid = agent.valid
        features[i, :, :2] = rotate(disp, -theta)
        features[i, :, 2] = valid
        valid_mask[i] = valid
        origins[i] = agent.history[-1, :2]
        headings[i] = theta
    # The x-axis is aligned with the reference vector by construction.
    features[:, -1, 1] = 0.0

    offsets = origins[None, :, :] - origins[:, None, :]
    rel_offset = rotate(offsets, -headings[:, None])
    rel_heading = wrap_angle(headings[None, :] - headings[:, None])

    has_future = np.array([a.future is not None for a in agents], dtype=bool)
    future_local = None
    if has_future.any():
        future_local = np.zeros((n, scene.T_f, 2))
        for i, agent in enumerate(agents):
            if agent.future is not None:
                future_local[i] = to_local(agent.future, origins[i], headings[i])

    return NormalizedScene(
        scene_id=scene.scene_id,
        agent_ids=[a.agent_id for a in agents],
        target_index=keep.index(scene.target_index),
        features=features,
        valid_mask=valid_mask,
        origins=origins,
        headings=headings,
        rel_offset=rel_offset,
        rel_heading=rel_heading,
        future_local=future_local,
        has_future=has_future,
        dt=scene.dt,
    )


def unnormalize_history(ns: NormalizedScene) -> np.ndarray:
    """Global positions [N, T_h, 2] rebuilt from features; invalid steps are NaN."""
    disp = rotate(ns.features[..., :2], ns.headings[:, None])
    after = np.cumsum(disp[:, ::-1], axis=1)[:, ::-1]
    suffix = np.concatenate([after[:, 1:], np.zeros_like(after[:, :1])], axis=1)
    positions = ns.origins[:, None, :] - suffix
    return np.where(ns.valid_mask[..., None], positions, np.nan)


# -- file I/O ------------------------------------------------------------------

def scene_to_record(scene: Scene) -> dict:
    agents = []
    for a in scene.agents:
        history = [[float(x), float(y), int(v)] for x, y, v in a.history]
        future = None if a.future is None else [[float(x), float(y)] for x, y in a.future]
        agents.append({"id": a.agent_id, "history": history, "future": future})
    return {"scene_id": scene.scene_id, "dt": scene.dt, "target": scene.target_index, "agents": agents}


def scene_from_record(record: Mapping, T_h: int = DEFAULT_T_H, T_f: int = DEFAULT_T_F) -> Scene:
    try:
        agents = []
        for a in record["agents"]:
            history = np.asarray(a["history"], dtype=np.float64)
            if history.ndim != 2 or history.shape[1:] != (3,):
                raise SchemaError(f"agent {a.get('id')!r}: history entries must be [x, y, valid]")
            future = a.get("future")
            if future is not None:
                future = np.asarray(future, dtype=np.float64)
                if future.ndim != 2 or future.shape[1:] != (2,):
                    raise SchemaError(f"agent {a.get('id')!r}: future entries must be [x, y]")
            agents.append(AgentTrack(str(a["id"]), history, future))
        scene = Scene(
            scene_id=str(record["scene_id"]),
            agents=agents,
            target_index=int(record["target"]),
            dt=float(record.get("dt", DEFAULT_DT)),
            T_h=T_h,
            T_f=T_f,
        )
    except KeyError as exc:
        raise SchemaError(f"missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(str(exc)) from None
    scene.validate()
    return scene


def parse_scene_file(path: str | Path, T_h: int = DEFAULT_T_H, T_f: int = DEFAULT_T_F) -> list[Scene]:
    """Read a JSON Lines scene file; errors carry the 1-based line number."""
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                scenes.append(scene_from_record(record, T_h, T_f))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return scenes


def write_scene_file(path: str | Path, scenes: Iterable[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene)) + "\n")


# -- synthetic scenes ----------------------------------------------------------

def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10 - 15 * u + 6 * u * u)


def simulate_track(
    primitive: str,
    start: np.ndarray,
    heading: float,
    speed: float,
    times: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noise-free positions [len(times), 2] for one motion primitive."""
    direction = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-direction[1], direction[0]])
    if primitive == "constant_velocity":
        travelled = speed * times
        return start + travelled[:, None] * direction
    if primitive in ("accelerate", "brake"):
        accel = rng.uniform(0.5, 2.5) if primitive == "accelerate" else -rng.uniform(0.5, 3.0)
        t = times
        if accel < 0:
            t = np.minimum(times, speed / -accel)
        travelled = speed * t + 0.5 * accel * t * t
        return start + travelled[:, None] * direction
    if primitive in ("turn_left", "turn_right"):
        rate = rng.uniform(0.1, 0.4) * (1.0 if primitive == "turn_left" else -1.0)
        h = heading + rate * times
        dx = (np.sin(h) - math.sin(heading)) * speed / rate
        dy = (math.cos(heading) - np.cos(h)) * speed / rate
        return start + np.stack([dx, dy], -1)
    if primitive == "lane_change":
        width = rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 3.8)
        duration = rng.uniform(2.5, 4.0)
        onset = rng.uniform(times[0], max(times[-1] - duration, times[0]))
        lateral = width * _smoothstep((times - onset) / duration)
        return start + (speed * times)[:, None] * direction + lateral[:, None] * normal
    raise ValueError(f"unknown motion primitive {primitive!r}")


def generate_synthetic(
    seed: int,
    n_scenes: int,
    n_agents_range: tuple[int, int] = (1, 8),
    motion_mix: Mapping[str, float] | None = None,
    noise_std: float = 0.03,
    late_appearance_prob: float = 0.2,
    dt: float = DEFAULT_DT,
    T_h: int = DEFAULT_T_H,
    T_f: int = DEFAULT_T_F,
    speed_range: tuple[float, float] = (2.0, 15.0),
    extent: float = 60.0,
) -> list[Scene]:
    """Deterministic synthetic scenes built from kinematic motion primitives.

    Agent 0 is the target and always has a full history. Other agents may
    appear late (left-padded with invalid steps) but are always observed for
    at least the last two history steps.
    """
    lo, hi = n_agents_range
    if not 1 <= lo <= hi <= MAX_AGENTS:
        raise ValueError(f"n_agents_range must lie within [1, {MAX_AGENTS}], got {n_agents_range}")
    mix = dict(motion_mix) if motion_mix is not None else {p: 1.0 for p in MOTION_PRIMITIVES}
    unknown = set(mix) - set(MOTION_PRIMITIVES)
    if unknown:
        raise ValueError(f"unknown motion primitives: {sorted(unknown)}")
    names = [p for p in MOTION_PRIMITIVES if mix.get(p, 0) > 0]
    weights = np.array([mix[p] for p in names], dtype=np.float64)
    weights /= weights.sum()

    rng = np.random.default_rng(seed)
    times = np.arange(T_h + T_f) * dt
    scenes = []
    for s in range(n_scenes):
        n_agents = int(rng.integers(lo, hi + 1))
        agents = []
        for a in range(n_agents):
            primitive = names[int(rng.choice(len(names), p=weights))]
            start = rng.uniform(-extent, extent, size=2)
            heading = rng.uniform(-math.pi, math.pi)
            speed = rng.uniform(*speed_range)
            track = simulate_track(primitive, start, heading, speed, times, rng)
            if noise_std > 0:
                track = track + rng.normal(scale=noise_std, size=track.shape)
            valid = np.ones(T_h)
            if a > 0 and T_h > 2 and rng.random() < late_appearance_prob:
                valid[: int(rng.integers(1, T_h - 1))] = 0.0
            hist_xy = np.where(valid[:, None] > 0, track[:T_h], 0.0)
            history = np.concatenate([hist_xy, valid[:, None]], axis=1)
            agents.append(AgentTrack(f"{a}", history, track[T_h:].copy()))
        scenes.append(Scene(f"synth-{seed}-{s:05d}", agents, 0, dt, T_h, T_f))
    return scenes


def parse_mix(text: str) -> dict[str, float]:
    """Parse ``name:weight,name:weight`` into a motion mix mapping."""
    mix = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, weight = part.partition(":")
        mix[name.strip()] = float(weight) if weight else 1.0
    return mix


def split_scenes(scenes: Sequence[Scene], fraction: float) -> tuple[list[Scene], list[Scene]]:
    cut = int(round(len(scenes) * fraction))
    return list(scenes[:cut]), list(scenes[cut:])
