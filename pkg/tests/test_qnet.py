import numpy as np
import pytest

import uavplace.qnet as qnet
from uavplace.env import Observation
from uavplace.qnet import (
    TINY_ARCH,
    ArchSpec,
    CheckpointError,
    encode_observation,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
)


def f32exact(a):
    return a.astype(np.float32).astype(np.float64)


def shaped_params(seed, arch=TINY_ARCH):
    """Random params whose ReLU pre-activations stay clear of the kink."""
    rng = np.random.default_rng(seed)
    p = init_params(int(rng.integers(2**31)), arch)
    for st in p.conv:
        st.bn_mean = f32exact(rng.normal(0.0, 0.2, st.bn_mean.shape))
        st.bn_var = f32exact(rng.uniform(2.0, 4.0, st.bn_var.shape))
        st.bn_scale = f32exact(rng.uniform(0.9, 1.1, st.bn_scale.shape))
        st.bn_shift = f32exact(rng.normal(0.6, 0.05, st.bn_shift.shape))
    p.fc_b = p.fc_b + 1.0
    x = rng.normal(size=(2, 2, arch.input_cells, arch.input_cells))
    actions = rng.integers(0, arch.n_actions, 2)
    targets = rng.normal(0.0, 1.0, 2)
    return p, x, actions, targets


def test_init_deterministic_and_shapes():
    a = init_params(7, TINY_ARCH)
    b = init_params(7, TINY_ARCH)
    for (na, va), (nb, vb) in zip(a.state_items(), b.state_items()):
        assert na == nb
        assert np.array_equal(va, vb)
    c = init_params(8, TINY_ARCH)
    assert not np.array_equal(a.conv[0].w, c.conv[0].w)
    assert a.adv_w.shape == (4, TINY_ARCH.fc_units)


def test_forward_output_shape_and_purity():
    p = init_params(0, TINY_ARCH)
    x = np.random.default_rng(1).normal(size=(5, 2, 9, 9))
    q1 = forward(p, x, mode="infer")
    q2 = forward(p, x, mode="infer")
    assert q1.shape == (5, 4)
    assert np.array_equal(q1, q2)


def test_zero_weights_give_zero_output():
    p = init_params(0, TINY_ARCH)
    for name, arr in p.trainable_items():
        p.set_(name, np.zeros_like(arr))
    x = np.random.default_rng(2).normal(size=(3, 2, 9, 9))
    assert np.all(forward(p, x, mode="infer") == 0.0)


def test_dueling_constant_advantage_cancels():
    p = init_params(3, TINY_ARCH)
    p.adv_w = np.zeros_like(p.adv_w)
    p.adv_b = np.full_like(p.adv_b, 3.7)
    x = np.random.default_rng(3).normal(size=(4, 2, 9, 9))
    q = forward(p, x, mode="infer")
    # all actions tie at V(s)
    assert np.all(np.abs(q - q[:, :1]) < 1e-12)


def test_dueling_invariant_to_advantage_offset():
    p = init_params(4, TINY_ARCH)
    x = np.random.default_rng(4).normal(size=(4, 2, 9, 9))
    q_before = forward(p, x, mode="infer")
    p.adv_b = p.adv_b + 11.25
    q_after = forward(p, x, mode="infer")
    assert np.max(np.abs(q_after - q_before)) < 1e-12


def test_loss_zero_when_targets_match():
    p, x, actions, _ = shaped_params(0)
    q = forward(p, x, mode="infer")
    targets = q[np.arange(len(actions)), actions]
    loss, grads = loss_and_grads(p, x, actions, targets, bn_mode="running")
    assert loss == 0.0
    for g in grads.values():
        assert np.all(g == 0.0)


def test_loss_arithmetic():
    p, x, actions, _ = shaped_params(1)
    x = x[:1]
    actions = actions[:1]
    q = forward(p, x, mode="infer")[0, actions[0]]
    loss, _ = loss_and_grads(p, x, actions, np.array([q - 3.0]), bn_mode="running")
    assert loss == pytest.approx(9.0, abs=1e-9)


def test_grads_flow_only_through_selected_action():
    p, x, actions, targets = shaped_params(2)
    actions = np.zeros(2, dtype=int)
    _, grads = loss_and_grads(p, x, actions, targets, bn_mode="running")
    # advantage rows for never-selected actions receive only the mean term
    _, grads_other = loss_and_grads(p, x, np.ones(2, dtype=int), targets, bn_mode="running")
    assert not np.allclose(grads["adv.w"], grads_other["adv.w"])


def central_diff(p, x, actions, targets, name, idx, h, **kw):
    arr = p.get(name).reshape(-1)
    orig = arr[idx]
    arr[idx] = orig + h
    lp, _ = loss_and_grads(p, x, actions, targets, **kw)
    arr[idx] = orig - h
    lm, _ = loss_and_grads(p, x, actions, targets, **kw)
    arr[idx] = orig
    return (lp - lm) / (2 * h)


def test_gradients_match_finite_differences_frozen_bn():
    h = 1e-3
    p, x, actions, targets = shaped_params(6)
    _, grads = loss_and_grads(p, x, actions, targets, bn_mode="running")
    for name, g in grads.items():
        fd = np.array(
            [
                central_diff(p, x, actions, targets, name, i, h, bn_mode="running")
                for i in range(g.size)
            ]
        )
        an = g.reshape(-1)
        rel = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-8)
        assert rel < 1e-4, f"{name}: rel {rel}"


def test_gradients_match_directional_batch_bn():
    # batch statistics make some parameter directions exactly ineffective
    # (conv bias shifts are removed by the batch mean), so verify along random
    # directions of the full parameter vector instead of coordinate-wise.
    h = 1e-5
    for seed in range(5):
        p, x, actions, targets = shaped_params(100 + seed)
        _, grads = loss_and_grads(p, x, actions, targets, bn_mode="batch")
        rng = np.random.default_rng(seed)
        direction = {name: rng.normal(size=g.shape) for name, g in grads.items()}
        norm = np.sqrt(sum(np.sum(v * v) for v in direction.values()))
        direction = {k: v / norm for k, v in direction.items()}
        analytic = sum(np.sum(grads[k] * v) for k, v in direction.items())

        def loss_at(t):
            q = p.copy()
            for name, v in direction.items():
                q.set_(name, q.get(name) + t * v)
            l, _ = loss_and_grads(q, x, actions, targets, bn_mode="batch")
            return l

        fd = (loss_at(h) - loss_at(-h)) / (2 * h)
        assert abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8) < 1e-5


def test_dropout_train_mode_seeded_reproducible():
    p = init_params(5)
    arch = p.arch
    p_small = init_params(5, TINY_ARCH)
    x = np.random.default_rng(6).normal(size=(4, 2, 9, 9))
    a = forward(p_small, x, mode="train", seed=42)
    b = forward(p_small, x, mode="train", seed=42)
    c = forward(p_small, x, mode="train", seed=43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError, match="requires a seed"):
        forward(p_small, x, mode="train")
    assert arch.dropout_p == 0.4


def test_batch_validation():
    p = init_params(0, TINY_ARCH)
    with pytest.raises(ValueError, match="shape"):
        forward(p, np.zeros((2, 2, 8, 8)))
    with pytest.raises(ValueError, match="finite"):
        forward(p, np.full((1, 2, 9, 9), np.nan))
    with pytest.raises(ValueError, match="mode"):
        forward(p, np.zeros((1, 2, 9, 9)), mode="best")


def test_checkpoint_round_trip(tmp_path):
    p, x, _, _ = shaped_params(7)
    path = tmp_path / "net.uavq"
    save_checkpoint(p, path)
    loaded = load_checkpoint(path)
    assert loaded.arch == p.arch
    assert np.array_equal(forward(loaded, x, "infer"), forward(p, x, "infer"))
    # running statistics survive exactly
    for (na, va), (nb, vb) in zip(p.state_items(), loaded.state_items()):
        assert na == nb
        assert np.array_equal(va, vb), na
    # save -> load -> save is byte stable
    path2 = tmp_path / "net2.uavq"
    save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_errors(tmp_path):
    p = init_params(1, TINY_ARCH)
    path = tmp_path / "net.uavq"
    save_checkpoint(p, path)
    raw = path.read_bytes()

    truncated = tmp_path / "trunc.uavq"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)

    bad_magic = tmp_path / "magic.uavq"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad_magic)

    trailing = tmp_path / "trail.uavq"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(trailing)


def test_checkpoint_arch_mismatch_rejected(tmp_path):
    p = init_params(1, TINY_ARCH)
    path = tmp_path / "tiny.uavq"
    save_checkpoint(p, path)
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(path, arch=ArchSpec())  # default 61-cell architecture


def test_params_stay_float32_exact():
    p = init_params(3, TINY_ARCH)
    for name, arr in p.state_items():
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64)), name


def test_encode_observation_endpoints():
    n = 5
    sinr = np.full((n, n), 50.0)
    sinr[0, 0] = -150.0
    sinr[1, 1] = -45.0
    topo = np.zeros((n, n))
    topo[0, 0] = 120.0
    topo[1, 1] = -10.0
    enc = encode_observation(Observation(topo=topo, sinr=sinr))
    assert enc.shape == (2, n, n)
    assert enc[0, 0, 0] == 0.0  # low sentinel -> exactly 0
    assert enc[0, 2, 2] == 1.0  # high sentinel -> exactly 1
    assert enc[0, 1, 1] == pytest.approx(105.0 / 200.0)
    assert enc[1, 0, 0] == 1.0  # clipped at +50 m
    assert enc[1, 1, 1] == pytest.approx(-0.2)


def test_arch_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec(input_cells=9)  # default kernels do not fit a 9-cell input
    with pytest.raises(ValueError):
        ArchSpec(dropout_p=1.0)
    assert TINY_ARCH.flat_features == 2 * 3 * 3
