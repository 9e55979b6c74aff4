import math

import numpy as np
import pytest

from trajcast import numcore as nc
from trajcast.interaction import (
    edge_inputs,
    last_valid_step,
    neighbor_mask,
    pairwise_embed,
    spatial_interact,
    spatial_layer,
    temporal_interact,
    temporal_layer,
)
from trajcast.model import init_params
from trajcast.numcore.gradcheck import check_gradients

from helpers import randomize, tiny_config


def relu(x):
    return np.maximum(x, 0.0)


def scene_geometry(rng, B=1, N=3):
    rel = rng.normal(size=(B, N, N, 2)) * 5
    head = rng.uniform(-np.pi, np.pi, size=(B, N, N))
    return rel, head


def test_pairwise_embed_by_hand(tiny_params):
    edges = np.array([[[[1.0, -2.0, math.cos(0.3), math.sin(0.3)]]]])
    e = pairwise_embed(edges, tiny_params, "interaction.spatial.0.edge").data
    w1 = tiny_params["interaction.spatial.0.edge.fc1.weight"].data
    b1 = tiny_params["interaction.spatial.0.edge.fc1.bias"].data
    w2 = tiny_params["interaction.spatial.0.edge.fc2.weight"].data
    b2 = tiny_params["interaction.spatial.0.edge.fc2.bias"].data
    np.testing.assert_allclose(e[0, 0, 0], relu(edges[0, 0, 0] @ w1 + b1) @ w2 + b2, atol=1e-12)
    assert e.shape == (1, 1, 1, 8)


def test_edge_inputs_layout():
    out = edge_inputs(np.array([[3.0, 4.0]]), np.array([np.pi / 2]), np.float64)
    np.testing.assert_allclose(out, [[3.0, 4.0, 0.0, 1.0]], atol=1e-15)


def _layer_inputs(rng, tiny_params, B=1, N=3):
    F = nc.Tensor(rng.normal(size=(B, N, 8)))
    rel, head = scene_geometry(rng, B, N)
    e = pairwise_embed(edge_inputs(rel, head, np.float64), tiny_params, "interaction.spatial.0.edge")
    neighbors = neighbor_mask(np.ones((B, N), bool), rel, math.inf)
    return F, e, neighbors


def test_saturated_gate_returns_self_projection(tiny_cfg, tiny_params):
    rng = np.random.default_rng(1)
    F, e, nb = _layer_inputs(rng, tiny_params)
    tiny_params["interaction.spatial.0.gate.bias"].data[...] = 1e4
    out = spatial_layer(F, e, nb, tiny_params, tiny_cfg, "interaction.spatial.0", residual=False)
    np.testing.assert_allclose(out.data, F.data @ tiny_params["interaction.spatial.0.self.weight"].data, atol=1e-12)


def test_fusion_is_convex_without_residual(tiny_cfg, tiny_params):
    rng = np.random.default_rng(2)
    F, e, nb = _layer_inputs(rng, tiny_params)
    out, parts = spatial_layer(F, e, nb, tiny_params, tiny_cfg, "interaction.spatial.0", residual=False, return_parts=True)
    g = parts["gate"].data
    assert np.all((g > 0) & (g < 1))
    lo = np.minimum(parts["self"].data, parts["message"].data)
    hi = np.maximum(parts["self"].data, parts["message"].data)
    assert np.all(out.data >= lo - 1e-12) and np.all(out.data <= hi + 1e-12)


def test_attention_weights_brute_force(tiny_cfg, tiny_params):
    rng = np.random.default_rng(3)
    F, e, nb = _layer_inputs(rng, tiny_params, N=4)
    nb[0, 0, 2] = False  # agent 0 ignores agent 2
    _, parts = spatial_layer(F, e, nb, tiny_params, tiny_cfg, "interaction.spatial.0", residual=False, return_parts=True)
    alpha = parts["alpha"].data
    name = "interaction.spatial.0"
    Wq = tiny_params[f"{name}.q.weight"].data
    Wk = tiny_params[f"{name}.k.weight"].data
    d = 4
    for i in range(4):
        q = F.data[0, i] @ Wq
        for h in range(2):
            sl = slice(h * d, (h + 1) * d)
            scores = []
            for j in range(4):
                k = np.concatenate([F.data[0, j], e.data[0, i, j]]) @ Wk
                scores.append(q[sl] @ k[sl] / math.sqrt(d) if nb[0, i, j] else -np.inf)
            w = np.exp(np.array(scores) - max(scores))
            np.testing.assert_allclose(alpha[0, i, :, h], w / w.sum(), atol=1e-12)
    assert np.all(alpha[0, 0, 2] == 0.0)


def test_layers_reduce_to_identity_when_sublayers_are_silenced(tiny_cfg, tiny_params):
    # pre-norm blocks keep an untouched residual stream
    rng = np.random.default_rng(10)
    for name in ("interaction.spatial.0", "interaction.temporal.0"):
        for suffix in ("self.weight", "v.weight", "out.weight", "out.bias", "ffn.fc2.weight", "ffn.fc2.bias"):
            if f"{name}.{suffix}" in tiny_params:
                tiny_params[f"{name}.{suffix}"].data[...] = 0.0
    F, e, nb = _layer_inputs(rng, tiny_params)
    out = spatial_layer(F, e, nb, tiny_params, tiny_cfg, "interaction.spatial.0")
    np.testing.assert_array_equal(out.data, F.data)
    X = nc.Tensor(rng.normal(size=(1, 2, 4, 8)))
    valid = np.ones((1, 2, 4), bool)
    np.testing.assert_array_equal(temporal_layer(X, valid, tiny_params, tiny_cfg, "interaction.temporal.0").data, X.data)


def test_spatial_permutation_equivariance(tiny_cfg, tiny_params):
    rng = np.random.default_rng(4)
    N = 4
    F = rng.normal(size=(1, N, 8))
    rel, head = scene_geometry(rng, N=N)
    nb = neighbor_mask(np.ones((1, N), bool), rel, math.inf)
    out = spatial_interact(nc.Tensor(F), edge_inputs(rel, head, np.float64), nb, tiny_params, tiny_cfg).data
    perm = np.array([2, 0, 3, 1])
    relp, headp = rel[:, perm][:, :, perm], head[:, perm][:, :, perm]
    outp = spatial_interact(nc.Tensor(F[:, perm]), edge_inputs(relp, headp, np.float64), nb, tiny_params, tiny_cfg).data
    np.testing.assert_allclose(outp, out[:, perm], atol=1e-12)


def test_phantom_agent_changes_nothing(tiny_cfg, tiny_params):
    rng = np.random.default_rng(5)
    N = 3
    F = rng.normal(size=(1, N, 8))
    rel, head = scene_geometry(rng, N=N)
    valid = np.ones((1, N), bool)
    base = spatial_interact(nc.Tensor(F), edge_inputs(rel, head, np.float64), neighbor_mask(valid, rel, math.inf), tiny_params, tiny_cfg).data
    F2 = np.concatenate([F, rng.normal(size=(1, 1, 8)) * 100], axis=1)
    rel2, head2 = scene_geometry(rng, N=N + 1)
    rel2[:, :N, :N], head2[:, :N, :N] = rel, head
    valid2 = np.array([[True, True, True, False]])
    out = spatial_interact(nc.Tensor(F2), edge_inputs(rel2, head2, np.float64), neighbor_mask(valid2, rel2, math.inf), tiny_params, tiny_cfg).data
    np.testing.assert_allclose(out[:, :N], base, atol=1e-12)
    assert np.all(out[:, N] == 0)


def test_radius_limits_neighbors():
    rel = np.zeros((1, 3, 3, 2))
    rel[0, 0, 1] = [5.0, 0.0]
    rel[0, 0, 2] = [50.0, 0.0]
    nb = neighbor_mask(np.ones((1, 3), bool), rel, 10.0)
    assert nb[0, 0].tolist() == [True, True, False]


def test_temporal_layer_ignores_invalid_steps(tiny_cfg, tiny_params):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(1, 2, 4, 8))
    valid = np.array([[[False, True, True, True], [False, False, True, True]]])
    base = temporal_interact(nc.Tensor(X), valid, tiny_params, tiny_cfg).data
    X2 = np.where(valid[..., None], X, rng.normal(size=X.shape) * 1e3)
    out = temporal_interact(nc.Tensor(X2), valid, tiny_params, tiny_cfg).data
    np.testing.assert_allclose(out, base, atol=1e-12)


def test_single_valid_step_attends_to_itself(tiny_cfg, tiny_params):
    rng = np.random.default_rng(7)
    X = rng.normal(size=(1, 1, 4, 8))
    valid = np.array([[[False, False, False, True]]])
    out, w = temporal_layer(nc.Tensor(X), valid, tiny_params, tiny_cfg, "interaction.temporal.0", return_weights=True)
    np.testing.assert_allclose(w.data[0, 0, :, 3, :], np.eye(4)[[3, 3]], atol=1e-12)
    assert np.isfinite(out.data).all()
    assert np.all(out.data[0, 0, :3] == 0)


def test_last_valid_step_picks_latest():
    X = nc.Tensor(np.arange(2 * 3 * 4, dtype=float).reshape(1, 2, 3, 4))
    valid = np.array([[[True, True, False], [False, False, False]]])
    out = last_valid_step(X, valid).data
    np.testing.assert_array_equal(out[0, 0], X.data[0, 0, 1])
    assert np.all(out[0, 1] == 0)


@pytest.mark.parametrize("residual", [True, False])
def test_interaction_gradients(residual):
    # Without residual paths stacked attention averages every step of an agent
    # to the same row, so deeper q/k gradients vanish below finite-difference
    # noise; one temporal layer keeps the check meaningful.
    cfg = tiny_config(interaction_residual=residual, temporal_layers=4 if residual else 1)
    rng = np.random.default_rng(8)
    p = randomize(init_params(cfg, seed=8), rng)
    F = nc.Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
    X = nc.Tensor(rng.normal(size=(1, 3, 4, 8)), requires_grad=True)
    rel, head = scene_geometry(rng)
    valid = np.ones((1, 3, 4), bool)
    valid[0, 2, :2] = False
    nb = neighbor_mask(np.ones((1, 3), bool), rel, math.inf)
    w1, w2 = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 3, 8))

    def fn():
        s = spatial_interact(F, edge_inputs(rel, head, np.float64), nb, p, cfg)
        t = temporal_interact(X, valid, p, cfg)
        return nc.add(nc.mul(s, w1), nc.mul(t, w2))

    probes = [F, X] + [t for n, t in p.items() if n.startswith("interaction.")]
    errs = check_gradients(fn, probes, h=1e-6, max_entries=5, rng=rng)
    assert max(errs) < 1e-4
