import itertools
import math
import random

import numpy as np
import pytest

from trajcast.bench import loglog_exponent, quadratic_fit, svg_line_plot, time_callable
from trajcast.decoder import prediction_records, write_predictions
from trajcast.errors import SchemaError
from trajcast.evaluation import min_ade, min_fde, miss_rate, score_files
from trajcast.scene import AgentTrack, Scene, generate_synthetic, rotate, write_scene_file


# -- brute-force oracles written with plain loops -------------------------------

def brute_ade(pred, truth, mode):
    K, N, T, _ = pred.shape
    if mode == "per-agent":
        total = 0.0
        for i in range(N):
            total += min(sum(math.dist(pred[k, i, t], truth[i, t]) for t in range(T)) / T for k in range(K))
        return total / N
    return min(sum(math.dist(pred[k, i, t], truth[i, t]) for i in range(N) for t in range(T)) for k in range(K)) / (N * T)


def brute_fde(pred, truth, mode):
    K, N = pred.shape[:2]
    if mode == "per-agent":
        return sum(min(math.dist(pred[k, i, -1], truth[i, -1]) for k in range(K)) for i in range(N)) / N
    return min(sum(math.dist(pred[k, i, -1], truth[i, -1]) for i in range(N)) for k in range(K)) / N


def brute_mr(pred, truth, mode, thr=2.0):
    K, N = pred.shape[:2]
    if mode == "per-agent":
        return sum(min(math.dist(pred[k, i, -1], truth[i, -1]) for k in range(K)) >= thr for i in range(N)) / N
    k = min(range(K), key=lambda k: sum(math.dist(pred[k, i, -1], truth[i, -1]) for i in range(N)))
    return sum(math.dist(pred[k, i, -1], truth[i, -1]) >= thr for i in range(N)) / N


def random_instance(rng):
    K, N, T = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 6)
    truth = rng.normal(size=(N, T, 2)) * 3
    pred = truth[None] + rng.normal(size=(K, N, T, 2)) * rng.uniform(0.1, 3)
    return pred, truth


@pytest.mark.parametrize("mode", ["per-agent", "paper-literal"])
def test_metrics_match_brute_force(mode):
    rng = np.random.default_rng(11)
    for _ in range(300):
        pred, truth = random_instance(rng)
        assert min_ade(pred, truth, mode) == pytest.approx(brute_ade(pred, truth, mode), abs=1e-9)
        assert min_fde(pred, truth, mode) == pytest.approx(brute_fde(pred, truth, mode), abs=1e-9)
        assert miss_rate(pred, truth, mode=mode) == pytest.approx(brute_mr(pred, truth, mode), abs=1e-9)


def test_trivial_values():
    truth = np.zeros((1, 5, 2))
    assert min_ade(truth[None], truth) == 0.0
    assert min_ade(truth[None] + [1.0, 0.0], truth) == pytest.approx(1.0)
    path = np.zeros((1, 1, 4, 2))
    path[0, 0, :3] = 7.0
    assert min_fde(path, np.zeros((1, 4, 2))) == 0.0
    tri = np.zeros((1, 1, 4, 2))
    tri[0, 0, -1] = [3.0, 4.0]
    assert min_fde(tri, np.zeros((1, 4, 2))) == pytest.approx(5.0)


def test_miss_rate_examples():
    truth = np.zeros((4, 3, 2))
    assert miss_rate(truth[None], truth) == 0.0
    assert miss_rate(truth[None] + [10.0, 0.0], truth) == 1.0
    pred = np.zeros((2, 4, 3, 2))
    pred[:, 2, -1] = [0.0, 2.5]  # agent 2 misses in both modes
    pred[0, 1, -1] = [5.0, 0.0]  # agent 1 is hit by mode 1
    assert miss_rate(pred, truth) == 0.25
    assert miss_rate(pred, truth, threshold=math.inf) == 0.0


def test_exactly_two_metres_is_a_miss():
    truth = np.zeros((1, 2, 2))
    pred = np.zeros((1, 1, 2, 2))
    pred[0, 0, -1] = [2.0, 0.0]
    assert miss_rate(pred, truth) == 1.0
    pred[0, 0, -1] = [1.999999, 0.0]
    assert miss_rate(pred, truth) == 0.0


def test_modes_differ_when_best_mode_varies_by_agent():
    truth = np.zeros((2, 1, 2))
    pred = np.zeros((2, 2, 1, 2))
    pred[0, 1] = 4.0  # mode 0 good for agent 0
    pred[1, 0] = 4.0  # mode 1 good for agent 1
    assert min_fde(pred, truth, "per-agent") == 0.0
    assert min_fde(pred, truth, "paper-literal") == pytest.approx(math.hypot(4, 4) / 2)


def test_k1_equals_plain_ade():
    rng = np.random.default_rng(3)
    pred, truth = rng.normal(size=(1, 3, 7, 2)), rng.normal(size=(3, 7, 2))
    plain = np.linalg.norm(pred[0] - truth, axis=-1).mean()
    for mode in ("per-agent", "paper-literal"):
        assert min_ade(pred, truth, mode) == pytest.approx(plain, abs=1e-12)


def test_rigid_invariance():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred, truth = random_instance(rng)
        angle, shift = rng.uniform(-np.pi, np.pi), rng.normal(size=2) * 50
        pred2, truth2 = rotate(pred, angle) + shift, rotate(truth, angle) + shift
        for mode in ("per-agent", "paper-literal"):
            assert abs(min_ade(pred, truth, mode) - min_ade(pred2, truth2, mode)) < 1e-9
            assert abs(min_fde(pred, truth, mode) - min_fde(pred2, truth2, mode)) < 1e-9


def test_empty_horizon_is_an_error():
    with pytest.raises(ValueError, match="T_f"):
        min_ade(np.zeros((1, 1, 0, 2)), np.zeros((1, 0, 2)))


# -- score_files ----------------------------------------------------------------

def _truth_file(tmp_path, n=5, seed=0):
    scenes = generate_synthetic(seed, n, n_agents_range=(1, 3))
    path = tmp_path / "truth.jsonl"
    write_scene_file(path, scenes)
    return scenes, path


def _perfect_records(scenes, K=6, offset=0.0):
    recs = []
    for s in scenes:
        ids = [a.agent_id for a in s.agents if a.valid[-1]]
        fut = np.stack([a.future for a in s.agents if a.valid[-1]])
        mu = np.repeat(fut[None], K, axis=0) + offset
        recs += prediction_records(s.scene_id, ids, mu, np.full((len(ids), K), 1.0 / K))
    return recs


def test_score_files_round_trip_zero(tmp_path):
    scenes, truth = _truth_file(tmp_path)
    pred = tmp_path / "pred.jsonl"
    write_predictions(pred, _perfect_records(scenes))
    out = tmp_path / "m.csv"
    report = score_files(pred, truth, out_csv=out)
    assert (report.minADE, report.minFDE, report.MR) == (0.0, 0.0, 0.0)
    header, row = out.read_text().splitlines()
    assert header == "scene_count,agent_count,K,minade,minfde,mr,metric_mode"
    assert row.startswith(f"5,{report.n_agents},6,")


def test_score_files_order_independent_and_matches_memory(tmp_path):
    scenes, truth = _truth_file(tmp_path, seed=4)
    rng = np.random.default_rng(0)
    recs = _perfect_records(scenes, offset=0.0)
    for r in recs:
        for m in r["modes"]:
            m["traj"] = (np.array(m["traj"]) + rng.normal(size=(30, 2))).tolist()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_predictions(a, recs)
    shuffled = list(recs)
    random.Random(1).shuffle(shuffled)
    write_predictions(b, shuffled)
    ra, rb = score_files(a, truth), score_files(b, truth)
    assert ra == rb
    keys = sorted((r["scene_id"], r["agent_id"]) for r in recs)
    lookup = {(r["scene_id"], r["agent_id"]): r for r in recs}
    pred = np.stack([np.array([m["traj"] for m in lookup[k]["modes"]]) for k in keys], axis=1)
    fut = {(s.scene_id, a.agent_id): a.future for s in scenes for a in s.agents}
    truth_arr = np.stack([fut[k] for k in keys])
    assert ra.minADE == pytest.approx(min_ade(pred, truth_arr), abs=1e-12)


def test_score_files_lists_missing_ids(tmp_path):
    scenes, truth = _truth_file(tmp_path)
    recs = _perfect_records(scenes)
    dropped = recs.pop(2)
    pred = tmp_path / "p.jsonl"
    write_predictions(pred, recs)
    with pytest.raises(SchemaError, match=f"missing prediction: scene '{dropped['scene_id']}' agent '{dropped['agent_id']}'"):
        score_files(pred, truth)


def test_score_files_rejects_mixed_k(tmp_path):
    scenes, truth = _truth_file(tmp_path)
    recs = _perfect_records(scenes)
    recs[0]["modes"] = recs[0]["modes"][:3]
    pred = tmp_path / "p.jsonl"
    write_predictions(pred, recs)
    with pytest.raises(SchemaError, match="mode counts"):
        score_files(pred, truth)


# -- bench helpers --------------------------------------------------------------

def test_loglog_exponent_recovers_power():
    xs = [8, 16, 32, 64]
    assert loglog_exponent(xs, [3 * x**2 for x in xs]) == pytest.approx(2.0)


def test_quadratic_fit_exact():
    S, T = zip(*itertools.product([8, 16, 32, 64], repeat=2))
    y = [1 + 0.5 * s * s + 0.25 * t * t for s, t in zip(S, T)]
    fit = quadratic_fit(S, T, y)
    assert fit["r2"] == pytest.approx(1.0)
    assert (fit["a"], fit["b"], fit["c"]) == pytest.approx((1, 0.5, 0.25))


def test_timer_batches_fast_calls():
    samples, calls = time_callable(lambda: None, repetitions=30, warmup=5)
    assert len(samples) == 30 and calls > 1


def test_svg_is_well_formed():
    import xml.etree.ElementTree as ET

    svg = svg_line_plot({"a<b": [(8, 1.0), (16, 4.0)], "c": [(8, 2.0), (16, 3.0)]}, "t & t", "x", "y")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")


def test_joint_kernel_matches_temporal_stack_for_one_agent(tiny_cfg, tiny_params):
    from trajcast import numcore as nc
    from trajcast.bench import joint_attention
    from trajcast.interaction import temporal_layer

    X = np.random.default_rng(9).normal(size=(1, 1, 5, 8))
    valid = np.ones((1, 1, 5), bool)
    ref = nc.Tensor(X)
    for layer in range(tiny_cfg.temporal_layers):
        ref = temporal_layer(ref, valid, tiny_params, tiny_cfg, f"interaction.temporal.{layer}")
    np.testing.assert_allclose(joint_attention(X[0], tiny_params, tiny_cfg), ref.data[0], atol=1e-10)
