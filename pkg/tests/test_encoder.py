import numpy as np
import pytest

from regime_diffusion.dataset import Normalizer
from regime_diffusion.encoder import (
    DESCRIPTOR_DIM,
    FEATURE_DIM,
    OBS_DIM,
    HistoryBuffer,
    RegimeEncoder,
    encode,
    encode_gradients,
)
from regime_diffusion.nncore import ContractViolation, directional_check
from regime_diffusion.nncore import functional as F


def test_buffer_keeps_most_recent_in_order():
    buf = HistoryBuffer(3)
    for i in range(5):
        buf.push(np.full(16, i), np.full(8, -i))
    arr = buf.array()
    assert buf.is_full and arr.shape == (3, OBS_DIM)
    assert np.array_equal(arr[:, 0], [2, 3, 4]) and np.array_equal(arr[:, 16], [-2, -3, -4])


def test_buffer_rejects_bad_observation():
    with pytest.raises(ContractViolation):
        HistoryBuffer(3).push(np.zeros(15), np.zeros(8))
    with pytest.raises(ContractViolation):
        HistoryBuffer(0)


def test_encode_requires_full_buffer():
    enc = RegimeEncoder(np.random.default_rng(0), channels=16)
    buf = HistoryBuffer(11).push(np.zeros(16), np.zeros(8))
    with pytest.raises(ContractViolation, match="1/11"):
        encode(buf, enc, Normalizer.identity())


def test_descriptor_shape_and_range():
    enc = RegimeEncoder(np.random.default_rng(0), channels=16)
    x = 10 * np.random.default_rng(1).standard_normal((5, 11, FEATURE_DIM))
    r = enc.forward(x).data
    assert r.shape == (5, DESCRIPTOR_DIM)
    assert np.all(np.abs(r) <= 1.0)


def test_descriptor_depends_only_on_recent_past():
    """Receptive field of two causal convs (k=3, dilations 1 and 2) is 7 steps."""
    enc = RegimeEncoder(np.random.default_rng(0), channels=16)
    x = np.random.default_rng(2).standard_normal((11, FEATURE_DIM))
    r0 = enc.forward(x).data
    y = x.copy()
    y[:4] += 5.0  # outside the receptive field of the last step
    assert not np.allclose(enc.forward(y).data, r0)  # group statistics still see it
    z = x.copy()
    z[-1] += 1.0
    assert not np.allclose(enc.forward(z).data, r0)


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    enc = RegimeEncoder(rng, channels=16)
    x = rng.standard_normal((4, 11, FEATURE_DIM))
    w = rng.standard_normal((4, DESCRIPTOR_DIM))
    err = directional_check(lambda: F.total(F.mul(enc.forward(x), w)), list(enc.params), rng, probes=20)
    assert err < 1e-4


def test_encode_gradients_is_vjp():
    rng = np.random.default_rng(4)
    enc = RegimeEncoder(rng, channels=16)
    buf = HistoryBuffer(11)
    for _ in range(11):
        buf.push(rng.standard_normal(16), rng.standard_normal(8))
    up = rng.standard_normal(DESCRIPTOR_DIM)
    g = encode_gradients(buf, enc, Normalizer.identity(), up)
    p = enc.params["proj.b"]
    base = encode(buf, enc, Normalizer.identity())
    p.data = p.data + 1e-6 * np.eye(DESCRIPTOR_DIM)[0]
    bumped = encode(buf, enc, Normalizer.identity())
    p.data = p.data - 1e-6 * np.eye(DESCRIPTOR_DIM)[0]
    assert np.isclose(g["enc.proj.b"][0], up @ (bumped - base) / 1e-6, rtol=1e-4)
