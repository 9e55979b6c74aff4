import json

import numpy as np
import pytest

from trajcast import numcore as nc
from trajcast.config import Config
from trajcast.decoder import (
    decode,
    prediction_records,
    read_predictions,
    to_global,
    to_local,
    write_predictions,
)
from trajcast.errors import NumericError, SchemaError
from trajcast.model import collate, forward, init_params
from trajcast.scene import generate_synthetic, normalize

from helpers import tiny_batch, tiny_config


def _inputs(rng, B=2, N=3, H=8):
    return nc.Tensor(rng.normal(size=(B, N, H))), nc.Tensor(rng.normal(size=(B, N, H)))


def test_output_shapes_and_simplex(tiny_cfg, tiny_params):
    fc = decode(*_inputs(np.random.default_rng(0)), tiny_params, tiny_cfg)
    assert fc.mu.shape == (2, 2, 3, 3, 2) and fc.b.shape == (2, 2, 3, 3, 2)
    assert fc.pi.shape == (2, 3, 2)
    np.testing.assert_allclose(fc.pi.data.sum(-1), 1.0, atol=1e-12)


def test_scale_stays_positive_for_very_negative_raw(tiny_cfg, tiny_params):
    bias = tiny_params["decoder.reg.fc2.bias"].data.reshape(tiny_cfg.K, tiny_cfg.T_f, 4)
    bias[..., 2:] = -1e6
    fc = decode(*_inputs(np.random.default_rng(1)), tiny_params, tiny_cfg)
    assert np.all(fc.b.data > 0)
    np.testing.assert_allclose(fc.b.data, 1e-4, rtol=1e-6)


def test_cumulative_offsets(tiny_params):
    cfg = tiny_config()
    fc = decode(*_inputs(np.random.default_rng(2)), tiny_params, cfg)
    np.testing.assert_allclose(fc.mu.data, np.cumsum(fc.raw.data[..., :2], axis=3), atol=1e-12)
    flat = decode(*_inputs(np.random.default_rng(2)), tiny_params, cfg.replace(cumulative_offsets=False))
    np.testing.assert_array_equal(flat.mu.data, flat.raw.data[..., :2])


def test_non_finite_parameters_rejected(tiny_cfg, tiny_params):
    tiny_params["decoder.cls.fc1.weight"].data[0, 0] = np.nan
    with pytest.raises(NumericError, match="decoder.cls.fc1.weight"):
        decode(*_inputs(np.random.default_rng(3)), tiny_params, tiny_cfg)


def test_default_config_has_six_modes():
    cfg = Config(precision="f64")
    batch = collate([normalize(s) for s in generate_synthetic(0, 1, n_agents_range=(2, 2))])
    fc = forward(batch, init_params(cfg), cfg).forecast
    assert fc.mu.shape == (1, 6, 2, 30, 2)
    assert np.isfinite(fc.mu.data).all()


def test_to_global_identity_frame():
    mu = np.random.default_rng(4).normal(size=(2, 1, 5, 2))
    np.testing.assert_array_equal(to_global(mu, np.zeros((1, 2)), np.zeros(1)), mu)


def test_to_global_half_turn_flips():
    mu = np.array([[[[1.0, 2.0]]]])
    out = to_global(mu, np.array([[10.0, 0.0]]), np.array([np.pi]))
    np.testing.assert_allclose(out, [[[[9.0, -2.0]]]], atol=1e-12)


def test_frame_round_trip():
    rng = np.random.default_rng(5)
    mu = rng.normal(size=(3, 4, 6, 2)) * 20
    origins, headings = rng.normal(size=(4, 2)) * 100, rng.uniform(-np.pi, np.pi, 4)
    np.testing.assert_allclose(to_local(to_global(mu, origins, headings), origins, headings), mu, atol=1e-10)


def test_prediction_file_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    mu, pi = rng.normal(size=(6, 2, 30, 2)), rng.dirichlet(np.ones(6), size=2)
    path = tmp_path / "p.jsonl"
    write_predictions(path, prediction_records("s1", ["a", "b"], mu, pi))
    back = read_predictions(path)
    assert [(p.scene_id, p.agent_id) for p in back] == [("s1", "a"), ("s1", "b")]
    np.testing.assert_array_equal(back[1].traj, mu[:, 1])
    np.testing.assert_array_equal(back[0].pi, pi[0])
    assert list(json.loads(path.read_text().splitlines()[0])) == ["scene_id", "agent_id", "modes"]


def test_malformed_prediction_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"scene_id": "s", "agent_id": "a", "modes": [{"pi": 1.0, "traj": [[0, 0]]}]}\n{"scene_id": "s"}\n')
    with pytest.raises(SchemaError, match=r"bad.jsonl:2"):
        read_predictions(path)


def test_heavily_masked_scene_has_no_nan():
    cfg = tiny_config()
    batch = tiny_batch(n_scenes=3, agents=(1, 4), late=1.0)
    fc = forward(batch, init_params(cfg), cfg).forecast
    assert np.isfinite(fc.mu.data).all() and np.isfinite(fc.pi.data).all()
