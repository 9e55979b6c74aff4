import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajcast.errors import ParseError, SchemaError
from trajcast.scene import (
    AgentTrack,
    Scene,
    generate_synthetic,
    normalize,
    parse_scene_file,
    rotate,
    unnormalize_history,
    write_scene_file,
)


def line_scene(history_xy, valid=None, future=None, T_h=None, T_f=30):
    history_xy = np.asarray(history_xy, dtype=float)
    T_h = T_h or len(history_xy)
    valid = np.ones(len(history_xy)) if valid is None else np.asarray(valid, dtype=float)
    hist = np.concatenate([history_xy, valid[:, None]], axis=1)
    return Scene("s", [AgentTrack("a", hist, future)], 0, 0.1, T_h, T_f)


def transform_scene(scene, angle, shift):
    agents = []
    for a in scene.agents:
        hist = a.history.copy()
        hist[:, :2] = rotate(hist[:, :2], angle) + shift
        hist[:, :2] = np.where(hist[:, 2:] > 0, hist[:, :2], 0.0)
        fut = None if a.future is None else rotate(a.future, angle) + shift
        agents.append(AgentTrack(a.agent_id, hist, fut))
    return Scene(scene.scene_id, agents, scene.target_index, scene.dt, scene.T_h, scene.T_f)


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert parse_scene_file(path) == []


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    hist = np.concatenate([rng.normal(size=(20, 2)) * 100, np.ones((20, 1))], axis=1)
    scene = Scene("one", [AgentTrack("car", hist, rng.normal(size=(30, 2)) * 100)], 0)
    path = tmp_path / "s.jsonl"
    write_scene_file(path, [scene])
    (back,) = parse_scene_file(path)
    assert back.agents[0].history.tobytes() == hist.tobytes()
    assert back.agents[0].future.tobytes() == scene.agents[0].future.tobytes()
    assert list(json.loads(path.read_text())) == ["scene_id", "dt", "target", "agents"]


def test_short_history_names_T_h(tmp_path):
    rec = {"scene_id": "x", "dt": 0.1, "target": 0,
           "agents": [{"id": "a", "history": [[0, 0, 1]] * 19, "future": None}]}
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(SchemaError, match="T_h=20") as info:
        parse_scene_file(path)
    assert ":1:" in str(info.value)


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = generate_synthetic(0, 1, (1, 1))
    write_scene_file(path, good)
    with open(path, "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(ParseError, match=":2:"):
        parse_scene_file(path)


def test_target_invalid_at_t0_rejected():
    hist = np.zeros((20, 3))
    hist[:-1, 2] = 1
    with pytest.raises(SchemaError, match="t=0"):
        Scene("x", [AgentTrack("a", hist)], 0).validate()


def test_stationary_agent():
    ns = normalize(line_scene(np.full((20, 2), 3.0)))
    assert np.all(ns.features[..., :2] == 0)
    assert ns.headings[0] == 0.0


def test_north_moving_agent_rotated_to_plus_x():
    hist = np.stack([np.zeros(20), np.arange(20.0)], axis=1)
    ns = normalize(line_scene(hist))
    assert ns.headings[0] == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(ns.features[0, 1:, :2], np.tile([1.0, 0.0], (19, 1)), atol=1e-12)
    np.testing.assert_array_equal(ns.features[0, 0, :2], [0.0, 0.0])


def test_late_appearance_is_padded_and_flagged():
    hist = np.stack([np.arange(20.0), np.zeros(20)], axis=1)
    valid = np.r_[np.zeros(5), np.ones(15)]
    ns = normalize(line_scene(np.where(valid[:, None] > 0, hist, 0.0), valid))
    np.testing.assert_array_equal(ns.valid_mask[0], valid > 0)
    assert np.all(ns.features[0, :6, :2] == 0)
    np.testing.assert_array_equal(ns.features[0, :, 2], valid)


def test_agents_unobserved_at_t0_dropped():
    scene = generate_synthetic(3, 1, (3, 3), late_appearance_prob=0.0)[0]
    scene.agents[2].history[-1, 2] = 0
    ns = normalize(scene)
    assert ns.agent_ids == ["0", "1"]


@pytest.mark.parametrize("seed", range(10))
def test_se2_invariance(seed):
    rng = np.random.default_rng(seed)
    scene = generate_synthetic(seed, 1, (2, 8))[0]
    angle = math.radians(37) if seed == 0 else rng.uniform(-math.pi, math.pi)
    shift = rng.uniform(-500, 500, size=2)
    a, b = normalize(scene), normalize(transform_scene(scene, angle, shift))
    np.testing.assert_allclose(a.features, b.features, atol=1e-9)
    np.testing.assert_array_equal(a.valid_mask, b.valid_mask)
    np.testing.assert_allclose(a.rel_offset, b.rel_offset, atol=1e-8)
    np.testing.assert_allclose(np.cos(a.rel_heading - b.rel_heading), 1.0, atol=1e-12)
    np.testing.assert_allclose(b.origins, rotate(a.origins, angle) + shift, atol=1e-9)
    np.testing.assert_allclose(np.cos(b.headings - a.headings - angle), 1.0, atol=1e-12)
    np.testing.assert_allclose(a.future_local, b.future_local, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unnormalize_reproduces_valid_history(seed):
    scene = generate_synthetic(seed, 1, (1, 6), late_appearance_prob=0.5)[0]
    ns = normalize(scene)
    rebuilt = unnormalize_history(ns)
    for i, agent in enumerate(scene.agents):
        v = agent.valid
        np.testing.assert_allclose(rebuilt[i][v], agent.history[v, :2], atol=1e-9, rtol=0)


def test_unnormalize_handles_gaps():
    hist = np.stack([np.arange(20.0) ** 1.1, np.sin(np.arange(20.0))], axis=1)
    valid = np.ones(20)
    valid[[0, 1, 7, 8, 12]] = 0
    ns = normalize(line_scene(np.where(valid[:, None] > 0, hist, 0), valid))
    rebuilt = unnormalize_history(ns)[0]
    np.testing.assert_allclose(rebuilt[valid > 0], hist[valid > 0], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_last_displacement_aligned_with_x(seed):
    ns = normalize(generate_synthetic(seed, 1, (1, 8))[0])
    assert np.all(ns.features[:, -1, 1] == 0)
    assert np.all(ns.features[:, -1, 0] >= 0)
    assert np.all(ns.features[:, 0, :2] == 0)
    np.testing.assert_array_equal(ns.features[..., 2], ns.valid_mask)


def test_generator_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_scene_file(a, generate_synthetic(7, 20, (2, 8)))
    write_scene_file(b, generate_synthetic(7, 20, (2, 8)))
    assert a.read_bytes() == b.read_bytes()


def test_constant_velocity_exactly_extrapolates():
    for scene in generate_synthetic(1, 5, (1, 4), {"constant_velocity": 1.0}, noise_std=0.0, late_appearance_prob=0.0):
        for agent in scene.agents:
            v = agent.history[-1, :2] - agent.history[-2, :2]
            expected = agent.history[-1, :2] + np.arange(1, 31)[:, None] * v
            np.testing.assert_allclose(agent.future, expected, atol=1e-9)


@pytest.mark.parametrize("direction,sign", [("turn_left", 1.0), ("turn_right", -1.0)])
def test_turn_curvature_sign(direction, sign):
    for scene in generate_synthetic(2, 10, (1, 3), {direction: 1.0}, noise_std=0.0):
        for agent in scene.agents:
            pos = np.concatenate([agent.history[agent.valid, :2], agent.future])
            d = np.diff(pos, axis=0)
            heading = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
            assert np.all(np.sign(np.diff(heading)) == sign)


def test_generator_includes_late_agents_and_respects_agent_range():
    scenes = generate_synthetic(5, 50, (2, 8))
    assert all(2 <= len(s.agents) <= 8 for s in scenes)
    assert any(not a.valid.all() for s in scenes for a in s.agents)
    assert all(s.agents[0].valid.all() for s in scenes)
