import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_diffusion.nncore import (
    Adam,
    AdamState,
    CheckpointError,
    ContractViolation,
    NumericFailure,
    ParamStore,
    Tape,
    adam_step,
    directional_check,
    forward_backward,
    load_checkpoint,
    parameter,
    save_checkpoint,
)
from regime_diffusion.nncore import functional as F


def test_tape_replays_in_reverse_order():
    x = parameter([1.0, 2.0], "x")
    with Tape() as tape:
        y = F.mul(x, x)
        z = F.total(F.add(y, 1.0))
    assert [n.op for n in tape.nodes] == ["mul", "add", "sum"]
    g = tape.gradient(z, [x])
    assert np.array_equal(g["x"], 2.0 * x.data)


def test_unused_parameter_gets_zero_gradient():
    x, y = parameter([1.0], "x"), parameter([3.0], "y")
    _, g = forward_backward(lambda: F.total(F.square(x)), [x, y])
    assert np.array_equal(g["y"], np.zeros(1))


def test_non_scalar_loss_rejected():
    x = parameter(np.ones(3), "x")
    with Tape() as tape:
        y = F.mul(x, 2.0)
    with pytest.raises(ContractViolation):
        tape.gradient(y, [x])


def test_nan_forward_value_names_op():
    x = parameter([1.0], "x")
    with pytest.raises(NumericFailure, match="mul"):
        F.mul(x, np.array([np.nan]))


def test_parameter_requires_name():
    with pytest.raises(ContractViolation):
        parameter([1.0], "")


def _op_cases(rng):
    x = parameter(rng.standard_normal((3, 7, 16)), "x")
    w = parameter(rng.standard_normal((3, 16, 8)) * 0.3, "w")
    b = parameter(rng.standard_normal(8), "b")
    gamma = parameter(1.0 + 0.1 * rng.standard_normal(16), "gamma")
    beta = parameter(0.1 * rng.standard_normal(16), "beta")
    dw = parameter(rng.standard_normal((16, 5)) * 0.3, "dw")
    tgt = rng.standard_normal((3, 7, 8))
    return {
        "dense": (lambda: F.mse(F.dense(x, dw), rng_fixed(rng, (3, 7, 5))), [x, dw]),
        "conv1d_d1": (lambda: F.mse(F.conv1d(x, w, 1, b), tgt), [x, w, b]),
        "conv1d_d4": (lambda: F.mse(F.conv1d(x, w, 4, b), tgt), [x, w, b]),
        "group_norm": (lambda: F.total(F.square(F.group_norm(x, 8, gamma, beta)) * 0.1 + F.group_norm(x, 8, gamma, beta)), [x, gamma, beta]),
        "silu": (lambda: F.total(F.silu(x)), [x]),
        "tanh": (lambda: F.total(F.mul(F.tanh(x), x)), [x]),
        "getitem_concat": (lambda: F.total(F.square(F.concat([F.getitem(x, (Ellipsis, -1, slice(None))), F.getitem(x, (Ellipsis, 0, slice(0, 4)))]))), [x]),
        "broadcast_time": (lambda: F.total(F.mul(F.broadcast_time(F.getitem(x, (Ellipsis, 0, slice(None))), 5), rng_fixed(rng, (3, 5, 16)))), [x]),
        "reshape_matmul": (lambda: F.total(F.square(F.matmul(F.reshape(x, (21, 16)), dw))), [x, dw]),
    }


_FIXED = {}


def rng_fixed(rng, shape):
    if shape not in _FIXED:
        _FIXED[shape] = np.random.default_rng(99).standard_normal(shape)
    return _FIXED[shape]


@pytest.mark.parametrize("name", ["dense", "conv1d_d1", "conv1d_d4", "group_norm", "silu", "tanh", "getitem_concat", "broadcast_time", "reshape_matmul"])
def test_primitive_gradients(name):
    rng = np.random.default_rng(0)
    fn, params = _op_cases(rng)[name]
    assert directional_check(fn, params, np.random.default_rng(1), probes=20) < 1e-6


@settings(max_examples=25, deadline=None)
@given(
    T=st.integers(2, 12),
    d=st.integers(1, 5),
    t=st.integers(0, 11),
    seed=st.integers(0, 10_000),
)
def test_conv_is_causal(T, d, t, seed):
    """Changing the input at time t leaves every earlier output untouched."""
    t = min(t, T - 1)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((T, 4))
    w = rng.standard_normal((3, 4, 2))
    y0 = F.conv1d(x, w, d).data
    x2 = x.copy()
    x2[t] += 1.0
    y1 = F.conv1d(x2, w, d).data
    assert np.array_equal(y0[:t], y1[:t])
    assert not np.allclose(y0[t], y1[t])


def test_conv_last_tap_is_current_step():
    x = np.arange(1.0, 6.0)[:, None]
    w = np.zeros((3, 1, 1))
    w[-1] = 1.0
    assert np.array_equal(F.conv1d(x, w, 2).data, x)
    w = np.zeros((3, 1, 1))
    w[0] = 1.0  # reads t - 2 * dilation
    assert np.array_equal(F.conv1d(x, w, 1).data[:, 0], [0, 0, 1, 2, 3])


def test_conv_rejects_bad_dilation():
    with pytest.raises(ContractViolation):
        F.conv1d(np.zeros((4, 2)), np.zeros((3, 2, 2)), 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(2, 9))
def test_group_norm_moments(seed, T):
    rng = np.random.default_rng(seed)
    x = 3.0 + 5.0 * rng.standard_normal((2, T, 16))
    y = F.group_norm(x, 8, np.ones(16), np.zeros(16)).data
    g = y.reshape(2, T, 8, 2)
    assert np.allclose(g.mean(axis=(1, 3)), 0.0, atol=1e-10)
    assert np.allclose(g.var(axis=(1, 3)), 1.0, atol=1e-3)


def test_group_norm_rejects_indivisible_channels():
    with pytest.raises(ContractViolation):
        F.group_norm(np.zeros((3, 10)), 8, np.ones(10), np.zeros(10))


def test_adam_first_step_is_lr_times_sign():
    # Bias correction makes the first update exactly lr * g / (|g| + eps).
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    new, state = adam_step(p, g, AdamState(lr=0.1))
    expected = p["w"] - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(new["w"], expected, rtol=0, atol=1e-12)
    assert state.step == 1
    assert np.array_equal(p["w"], [1.0, -2.0, 0.5])


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(3)
    p = {"w": rng.standard_normal(4)}
    state = AdamState(lr=0.01)
    m = v = np.zeros(4)
    w = p["w"].copy()
    for t in range(1, 30):
        g = {"w": rng.standard_normal(4)}
        p, state = adam_step(p, g, state)
        m = 0.9 * m + 0.1 * g["w"]
        v = 0.999 * v + 0.001 * g["w"] ** 2
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p["w"], w, atol=1e-14)


def test_adam_minimizes_quadratic():
    x = parameter([5.0, -3.0], "x")
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(500):
        _, g = forward_backward(lambda: F.total(F.square(x)), [x])
        opt.step(g)
    assert np.all(np.abs(x.data) < 1e-2)


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ContractViolation):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_param_store_rejects_duplicates():
    s = ParamStore("m.")
    s.add("a", np.zeros(2))
    with pytest.raises(KeyError):
        s.add("a", np.zeros(2))
    assert s["a"].name == "m.a"


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "c": np.array(1.5)}
    save_checkpoint(tmp_path / "m.ckpt", arrays, {"seed": 3})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"seed": 3}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])


def test_checkpoint_detects_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": np.ones(10)}, {})
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
