import json

import numpy as np
import pytest

from swarmwall import kernel as K
from swarmwall.config import SimConfig
from swarmwall.qnet import (N_PARAMETERS, PARAM_SHAPES, Action, CorruptCheckpointError, QNetwork, RlController,
                            ShapeMismatchError, VersionMismatchError, act_to_motion, decode_tokens,
                            encode_observation, load_checkpoint, motion_batch, save_checkpoint, select_action,
                            select_actions)
from swarmwall.scenarios import ScenarioSpec
from swarmwall.sim import N_NEIGHBORS, ObservationFrame, init_world, sense_batch, tick

CFG = SimConfig()


def frame(entries):
    d = np.full(N_NEIGHBORS, CFG.d_max)
    a = np.zeros(N_NEIGHBORS)
    s = np.zeros(N_NEIGHBORS, np.int8)
    v = np.zeros(N_NEIGHBORS, bool)
    for k, (dist, aoa, nest) in enumerate(entries):
        d[k], a[k], s[k], v[k] = dist, aoa, nest, True
    return ObservationFrame(d, a, s, v, np.where(v, np.arange(N_NEIGHBORS), -1), np.where(v, d, np.inf))


def random_batch(rng, B=16):
    tokens = np.stack([rng.random((B, N_NEIGHBORS)), rng.uniform(-1, 1, (B, N_NEIGHBORS)),
                       rng.integers(0, 2, (B, N_NEIGHBORS))], axis=-1).astype(np.float32)
    mask = rng.random((B, N_NEIGHBORS)) < 0.7
    mask[:, 0] = True
    return tokens, mask


def test_parameter_count():
    assert N_PARAMETERS == 66820
    net = QNetwork.init(np.random.default_rng(0))
    assert sum(p.data.size for p in net.params.values()) == 66820
    assert set(net.params) == set(PARAM_SHAPES)


def test_encode_endpoints_and_padding():
    t, m = encode_observation(frame([(CFG.d_max, 0.0, 1), (0.0, np.pi / 2, 0), (2 * CFG.d_max, -np.pi, 1)]), CFG)
    assert t.dtype == np.float32
    np.testing.assert_allclose(t[0], [1.0, 0.0, 1.0])
    np.testing.assert_allclose(t[1], [0.0, 0.5, 0.0])
    np.testing.assert_allclose(t[2], [1.0, -1.0, 1.0])
    assert list(m) == [True] * 3 + [False] * 4
    d, th = decode_tokens(t[:2], CFG)
    np.testing.assert_allclose(d, [CFG.d_max, 0.0])
    np.testing.assert_allclose(th, [0.0, np.pi / 2], rtol=1e-6)


def test_encode_empty_frame_gets_sentinel():
    t, m = encode_observation(frame([]), CFG)
    assert m[0] and not m[1:].any()
    np.testing.assert_array_equal(t[0], [1, 0, 0])


def test_forward_shapes_and_finite():
    net = QNetwork.init(np.random.default_rng(0))
    tokens, mask = random_batch(np.random.default_rng(1))
    q = net.q_values(tokens, mask)
    assert q.shape == (16, 4) and np.all(np.isfinite(q))
    assert net.q_values(tokens[0], mask[0]).shape == (1, 4)
    with pytest.raises(K.DimensionError):
        net.q_values(tokens[..., :2], mask)


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    net = QNetwork.init(rng)
    tokens, mask = random_batch(rng, 32)
    q = net.q_values(tokens, mask)
    for _ in range(5):
        perm = rng.permutation(N_NEIGHBORS)
        assert np.max(np.abs(net.q_values(tokens[:, perm], mask[:, perm]) - q)) < 1e-6


def test_padding_content_is_ignored():
    rng = np.random.default_rng(3)
    net = QNetwork.init(rng)
    tokens, mask = random_batch(rng, 8)
    junk = tokens.copy()
    junk[~mask] = rng.normal(size=(int((~mask).sum()), 3)) * 50
    assert np.allclose(net.q_values(tokens, mask), net.q_values(junk, mask), atol=1e-6)


def test_train_mode_uses_dropout_and_updates_stats():
    rng = np.random.default_rng(4)
    net = QNetwork.init(rng)
    tokens, mask = random_batch(rng)
    before = net.stats.mean.copy()
    a = net.forward(tokens, mask, training=True, rng=np.random.default_rng(0)).data
    b = net.forward(tokens, mask, training=True, rng=np.random.default_rng(1)).data
    assert not np.allclose(a, b)
    assert not np.allclose(before, net.stats.mean)


def test_end_to_end_gradient_float64():
    rng = np.random.default_rng(5)
    net = QNetwork.init(rng).astype(np.float64)
    tokens, mask = random_batch(rng, 6)
    actions = rng.integers(0, 4, 6)
    y = rng.normal(size=6)

    def loss():
        return K.huber_loss(K.take_along_last(net.forward(tokens, mask), actions), y)

    grads = K.gradients(loss(), net.params)
    h = 1e-6
    for name in ("head.w", "attn.wo", "attn.wq", "bn.gamma"):
        p = net.params[name].data
        for flat in rng.choice(p.size, 5, replace=False):
            i = np.unravel_index(flat, p.shape)
            old = p[i]
            p[i] = old + h
            up = float(loss().data)
            p[i] = old - h
            dn = float(loss().data)
            p[i] = old
            assert grads[name][i] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-9)


def test_select_action_greedy_and_random():
    rng = np.random.default_rng(0)
    assert select_action([0.1, 0.9, 0.3, 0.2], 0.0, rng) == Action.AVOID_NON_NESTMATE
    picks = [select_action([0, 1, 0, 0], 1.0, rng) for _ in range(4000)]
    counts = np.bincount(picks, minlength=4) / 4000
    assert np.allclose(counts, 0.25, atol=0.03)
    with pytest.raises(ValueError):
        select_action([0, 0, 0, 0], 1.5, rng)
    q = np.tile([0.0, 0.0, 5.0, 0.0], (10, 1))
    assert np.all(select_actions(q, 0.0, rng) == Action.STANDSTILL)


def test_motion_primitives():
    f = frame([(30, 0.4, 1), (50, -0.7, 0)])
    rng = np.random.default_rng(0)
    cfg = SimConfig(crw_sigma=0.0)
    assert act_to_motion(Action.AVOID_NESTMATE, f, 0, rng, cfg)[:2] == pytest.approx((cfg.speed, 0.4 - np.pi))
    assert act_to_motion(Action.AVOID_NON_NESTMATE, f, 0, rng, cfg)[:2] == pytest.approx((cfg.speed, np.pi - 0.7))
    assert act_to_motion(Action.STANDSTILL, f, 30, rng, cfg) == (0.0, 0.0, 30)
    assert act_to_motion(Action.RANDOM_WALK, f, 30, rng, cfg) == (cfg.speed, 0.0, 0)
    # No non-nestmate visible: fleeing falls back to a random-walk step.
    lone = frame([(30, 0.4, 1)])
    assert act_to_motion(Action.AVOID_NON_NESTMATE, lone, 0, rng, cfg)[:2] == (cfg.speed, 0.0)


def test_rl_controller_standstill_latch():
    net = QNetwork.zeros()
    net.params["head.b"].data[:] = [0, 0, 1, 0]
    w = init_world(ScenarioSpec(3, 5, 5), CFG, seed=0)
    ctrl = RlController(net, hold_ticks=3, epsilon=0.0)
    tick(w, ctrl)
    assert ctrl.queried.all() and np.all(w.timer == 3) and np.all(w.speeds == 0)
    for _ in range(3):
        tick(w, ctrl)
        assert not ctrl.queried.any()
    tick(w, ctrl)
    assert ctrl.queried.all()


def test_checkpoint_round_trip_bitwise(tmp_path):
    net = QNetwork.init(np.random.default_rng(0))
    net.stats.mean[:] = np.random.default_rng(1).normal(size=128)
    path = tmp_path / "ck.json"
    save_checkpoint(net, {"step": 5}, path)
    back = load_checkpoint(path)
    for k, v in net.arrays().items():
        assert np.array_equal(back.arrays()[k], v) and back.arrays()[k].dtype == np.float32
    tokens, mask = random_batch(np.random.default_rng(2))
    assert np.array_equal(back.q_values(tokens, mask), net.q_values(tokens, mask))


def test_checkpoint_errors(tmp_path):
    net = QNetwork.init(np.random.default_rng(0))
    path = tmp_path / "ck.json"
    save_checkpoint(net, {}, path)
    doc = json.loads(path.read_text())

    bad = dict(doc, format_version="2")
    (tmp_path / "v.json").write_text(json.dumps(bad))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "v.json")

    bad = json.loads(path.read_text())
    bad["tensors"]["head.w"]["shape"] = [4, 128]
    (tmp_path / "s.json").write_text(json.dumps(bad))
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "s.json")

    bad = json.loads(path.read_text())
    bad["tensors"]["head.b"]["data"] = bad["tensors"]["head.b"]["data"][:-4]
    (tmp_path / "t.json").write_text(json.dumps(bad))
    with pytest.raises((ShapeMismatchError, CorruptCheckpointError)):
        load_checkpoint(tmp_path / "t.json")

    (tmp_path / "g.json").write_text("{not json")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "g.json")


def test_policy_runs_in_world():
    net = QNetwork.init(np.random.default_rng(0))
    w = init_world(ScenarioSpec(3, 10, 10), CFG, seed=1)
    ctrl = RlController(net, epsilon=0.1, rng=np.random.default_rng(0))
    for _ in range(20):
        tick(w, ctrl)
    assert ctrl.last_tokens.shape == (20, N_NEIGHBORS, 3)
    t, m = encode_observation(sense_batch(w), CFG)
    assert t.shape == (20, N_NEIGHBORS, 3) and m.any(axis=1).all()
