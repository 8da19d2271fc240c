"""Velocity net behavior, parameter-tree ops, and checkpoint format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import autodiff as nd
from flowlab.autodiff import Tape, grads_of
from flowlab.models import CheckpointError, NetConfig, VelocityNet, \
    ema_update, load_checkpoint, merge_interpolate, quantize_weights, \
    save_checkpoint, NULL_CLASS
from flowlab.rng import Rng

from util import FD_REL_TOL, fd_grads, tree_max_rel_err


def small_net(seed=0, width=16, n_classes=4):
    cfg = NetConfig(width=width, depth=12, n_classes=n_classes)
    return VelocityNet.init(cfg, Rng(seed))


def test_zero_init_output_layer():
    net = small_net()
    x = Rng(1).normal((5, 2))
    v = net.forward(x, 0.3, np.zeros(5, dtype=int))
    np.testing.assert_array_equal(v, np.zeros((5, 2)))


def test_null_condition_uses_distinct_row():
    net = small_net()
    net.params["out.w"] = Rng(2).normal((16, 2)) * 0.1
    x = Rng(3).normal((4, 2))
    v_null = net.forward(x, 0.5, np.full(4, NULL_CLASS))
    v_zero = net.forward(x, 0.5, np.zeros(4, dtype=int))
    assert not np.array_equal(v_null, v_zero)


def test_class_id_out_of_range():
    net = small_net(n_classes=4)
    x = np.zeros((2, 2))
    with pytest.raises(ValueError):
        net.forward(x, 0.5, np.array([0, 4]))
    with pytest.raises(ValueError):
        net.forward(x, 0.5, np.array([-2, 0]))


def test_forward_deterministic_and_per_sample_t():
    net = small_net()
    net.params["out.w"] = Rng(2).normal((16, 2)) * 0.1
    x = Rng(4).normal((3, 2))
    c = np.array([0, 1, 2])
    a = net.forward(x, 0.25, c)
    b = net.forward(x, 0.25, c)
    np.testing.assert_array_equal(a, b)
    tv = np.array([0.25, 0.25, 0.25])
    np.testing.assert_array_equal(net.forward(x, tv, c), a)


def test_features_match_forward_blocks():
    net = small_net(seed=5)
    net.params["out.w"] = Rng(6).normal((16, 2)) * 0.1
    x = Rng(7).normal((6, 2))
    c = np.zeros(6, dtype=int)
    taps = (3, 4, 5, 6, 8, 10, 11)
    feats, v = net.forward(x, 0.4, c, taps=taps)
    assert len(feats) == 7
    assert all(f.shape == (6, 16) for f in feats)
    np.testing.assert_array_equal(v, net.forward(x, 0.4, c))
    # a tap at the last block equals the pre-output hidden state
    feats_last, _ = net.forward(x, 0.4, c, taps=(11,))
    np.testing.assert_array_equal(feats[-1], feats_last[0])

    empty, v2 = net.forward(x, 0.4, c, taps=())
    assert empty == []
    np.testing.assert_array_equal(v2, v)
    with pytest.raises(ValueError):
        net.forward(x, 0.4, c, taps=(12,))


def test_forward_gradient_matches_finite_differences():
    cfg = NetConfig(width=6, depth=3, n_classes=2, time_dim=4, cond_dim=4)
    net = VelocityNet.init(cfg, Rng(8))
    net.params["out.w"] = Rng(9).normal((6, 2)) * 0.3
    x = Rng(10).normal((3, 2))
    c = np.array([0, 1, 0])

    tape = Tape()
    wrapped = tape.wrap(net.params)
    v = net.forward(x, 0.37, c, params=wrapped)
    tape.backward(nd.reduce_sum(nd.mul(v, v)))
    got = grads_of(wrapped)

    def f():
        out = net.forward(x, 0.37, c)
        return float((out * out).sum())

    ref = fd_grads(f, net.params)
    assert tree_max_rel_err(got, ref) < FD_REL_TOL


# -- ema ----------------------------------------------------------------------

def test_ema_basic_and_fixed_point():
    shadow = {"w": np.zeros(3)}
    live = {"w": np.ones(3)}
    out = ema_update(shadow, live, 0.99)
    np.testing.assert_allclose(out["w"], 0.01, atol=1e-15)

    same = {"w": Rng(0).normal((4,))}
    out = ema_update(same, {"w": same["w"].copy()}, 0.99)
    np.testing.assert_array_equal(out["w"], same["w"])


def test_ema_geometric_decay():
    shadow = {"w": np.array([1.0])}
    live = {"w": np.array([0.0])}
    cur = shadow
    for _ in range(100):
        cur = ema_update(cur, live, 0.99)
    assert abs(cur["w"][0] - 0.99 ** 100) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 50))
def test_ema_convexity(beta, seed):
    rng = Rng(seed)
    shadow = {"w": rng.normal((5,))}
    live = {"w": rng.normal((5,))}
    out = ema_update(shadow, live, beta)
    lo = np.minimum(shadow["w"], live["w"])
    hi = np.maximum(shadow["w"], live["w"])
    assert ((out["w"] >= lo - 1e-12) & (out["w"] <= hi + 1e-12)).all()


def test_ema_tree_mismatch():
    with pytest.raises(ValueError):
        ema_update({"a": np.zeros(2)}, {"b": np.zeros(2)}, 0.9)


# -- merging -------------------------------------------------------------------

def test_merge_values_and_endpoints():
    m1 = {"w": np.array([0.0])}
    m2 = {"w": np.array([1.0])}
    np.testing.assert_allclose(merge_interpolate(m1, m2, 0.3)["w"], [0.7])
    np.testing.assert_array_equal(merge_interpolate(m1, m2, 1.0)["w"], m1["w"])
    np.testing.assert_array_equal(merge_interpolate(m1, m2, 0.0)["w"], m2["w"])


def test_merge_identity_is_exact():
    m = {"w": Rng(1).normal((7, 3))}
    out = merge_interpolate(m, {"w": m["w"].copy()}, 0.3)
    np.testing.assert_array_equal(out["w"], m["w"])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 50))
def test_merge_ratio_reflection(ratio, seed):
    rng = Rng(seed)
    m1 = {"w": rng.normal((4,))}
    m2 = {"w": rng.normal((4,))}
    a = merge_interpolate(m1, m2, ratio)["w"]
    b = merge_interpolate(m2, m1, 1.0 - ratio)["w"]
    np.testing.assert_allclose(a, b, atol=1e-15)


# -- quantization ---------------------------------------------------------------

def test_quantize_error_bound():
    net = small_net(seed=11)
    w = np.linspace(-1.0, 1.0, net.cfg.width * 2).reshape(net.cfg.width, 2)
    net.params["out.w"] = w.copy()
    q = quantize_weights(net, 8)
    err = np.abs(q.params["out.w"] - w).max()
    assert err <= np.abs(w).max() / 254.0 + 1e-15


def test_quantize_zero_tensor_and_validation():
    net = small_net(seed=12)
    q = quantize_weights(net, 8)
    np.testing.assert_array_equal(q.params["out.w"], 0.0)  # zero-initialized
    with pytest.raises(ValueError):
        quantize_weights(net, 7)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([6, 8, 16]), st.integers(0, 30))
def test_quantize_idempotent(bits, seed):
    net = small_net(seed=seed)
    net.params["out.w"] = Rng(seed + 100).normal((16, 2))
    q1 = quantize_weights(net, bits)
    q2 = quantize_weights(q1, bits)
    for k in net.params:
        np.testing.assert_array_equal(q1.params[k], q2.params[k])


def test_quantize_leaves_original_untouched():
    net = small_net(seed=13)
    net.params["out.w"] = Rng(14).normal((16, 2))
    before = net.params["out.w"].copy()
    quantize_weights(net, 6)
    np.testing.assert_array_equal(net.params["out.w"], before)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = small_net(seed=15)
    net.params["out.w"] = Rng(16).normal((16, 2)) * 0.1
    meta = {"stage": "teacher", "note": 1}
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, meta, path)
    loaded, meta2 = load_checkpoint(path)
    assert meta2["stage"] == "teacher" and meta2["note"] == 1
    x = Rng(17).normal((8, 2))
    c = np.zeros(8, dtype=int)
    np.testing.assert_array_equal(loaded.forward(x, 0.6, c),
                                  net.forward(x, 0.6, c))
    for k in net.params:
        np.testing.assert_array_equal(loaded.params[k], net.params[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    net = small_net()
    save_checkpoint(net, {}, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_checkpoint(small_net(), {}, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_shape_disagreement(tmp_path):
    # a width-16 tensor blob paired with width-32 hyperparameters
    net = small_net(width=16)
    path = tmp_path / "mismatch.ckpt"
    save_checkpoint(net, {}, path)
    raw = path.read_bytes()
    patched = raw.replace(b'"width": 16', b'"width": 32', 1)
    assert patched != raw
    path.write_bytes(patched)
    with pytest.raises(CheckpointError, match="shape|disagree"):
        load_checkpoint(path)


def test_checkpoint_version_gate(tmp_path):
    import struct

    path = tmp_path / "ver.ckpt"
    save_checkpoint(small_net(), {}, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
