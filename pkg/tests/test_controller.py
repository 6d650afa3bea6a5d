import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_diffusion import controller as C
from regime_diffusion.dataset import ReferenceSample


def _ref(rng):
    return ReferenceSample(rng.standard_normal(8), rng.standard_normal(8), rng.standard_normal(8))


def test_closed_loop_error_dynamics():
    """With tau = M_bar chi_dd + H, the law gives M_bar s_dot = -Lambda s + (H_hat - H) - switching."""
    g = C.ControllerGains()
    rng = np.random.default_rng(0)
    ref = _ref(rng)
    chi, chid = ref.chi + 0.1 * rng.standard_normal(8), ref.chid + 0.1 * rng.standard_normal(8)
    H, H_hat = rng.standard_normal(8), rng.standard_normal(8)
    e, e_dot = C.tracking_error(chi, chid, ref)
    s = C.sliding_variable(e, e_dot, g.phi)
    tau = C.control_input(s, e_dot, ref.chidd, H_hat, 0.7, g)
    chidd = (tau - H) / g.M_bar
    s_dot = chidd - ref.chidd + g.phi * e_dot
    switching = 0.7 * s / np.sqrt(s @ s + g.varpi)
    assert np.allclose(g.M_bar * s_dot, -g.lam * s + H_hat - H - switching, atol=1e-12)


def test_angle_errors_wrapped():
    ref = ReferenceSample(np.r_[np.zeros(6), np.pi - 0.1, 0], np.zeros(8), np.zeros(8))
    e, _ = C.tracking_error(np.r_[np.zeros(6), -np.pi + 0.1, 0], np.zeros(8), ref)
    assert np.isclose(e[6], 0.2)


@settings(max_examples=50, deadline=None)
@given(s0=st.floats(1e-6, 10), norms=st.lists(st.floats(0, 100), min_size=1, max_size=50))
def test_adaptive_gain_stays_positive(s0, norms):
    sig = s0
    for n in norms:
        sig = C.adapt_step(sig, n, 2.0, 0.02)
        assert sig > 0


def test_adapt_step_contract():
    with pytest.raises(ValueError):
        C.adapt_step(0.1, 1.0, 2.0, 0.6)
    with pytest.raises(ValueError):
        C.adapt_step(0.1, 1.0, 2.0, 0.0)


def test_adaptive_gain_fixed_point():
    sig = 0.1
    for _ in range(2000):
        sig = C.adapt_step(sig, 3.0, 2.0, 0.02)
    assert np.isclose(sig, 1.5)


def test_gain_validation():
    with pytest.raises(ValueError):
        C.ControllerGains(phi=np.ones(7))
    with pytest.raises(ValueError):
        C.ControllerGains(lam=-np.ones(8))
    with pytest.raises(ValueError):
        C.ControllerGains(M_bar=np.ones((8, 8)))
    with pytest.raises(ValueError):
        C.ControllerGains(nu=0.0)
    g = C.ControllerGains(phi=np.diag(np.arange(1.0, 9.0)))
    assert np.array_equal(g.phi, np.arange(1.0, 9.0))


def test_lyapunov_rates_for_default_gains():
    rho, delta = C.lyapunov_rates(C.ControllerGains(), 0.5)
    # min(lambda_min = 1.2, nu / 2 = 1) / max(min M_bar / 2 = 0.01, 1/2) = 2.
    assert rho == 2.0 and delta == 0.25


def test_monitor_accepts_decay_and_flags_growth():
    g = C.ControllerGains()
    mon = C.LyapunovMonitor(g, 0.1, 1e-3)
    t = np.arange(0, 5, 0.02)
    ok = mon.check(5.0 * np.exp(-3.0 * t), 0.02)
    assert ok["fraction"] == 1.0 and ok["ticks_outside"] > 0
    bad = mon.check(5.0 * np.exp(0.5 * t), 0.02)
    assert bad["fraction"] == 0.0


def test_batched_controller_matches_single():
    rng = np.random.default_rng(1)
    ref = _ref(rng)
    chi = ref.chi + 0.2 * rng.standard_normal((3, 8))
    chid = ref.chid + 0.2 * rng.standard_normal((3, 8))
    H = rng.standard_normal((3, 8))
    batch = C.AdaptiveController(batch=(3,))
    tb = batch.update(chi, chid, ref, H)
    for i in range(3):
        single = C.AdaptiveController()
        assert np.allclose(single.update(chi[i], chid[i], ref, H[i]), tb[i], atol=1e-14)


def test_controller_updates_gain_before_input():
    ctrl = C.AdaptiveController()
    ref = ReferenceSample(np.zeros(8), np.zeros(8), np.zeros(8))
    chi = np.ones(8)
    tau = ctrl.update(chi, np.zeros(8), ref, np.zeros(8))
    s = ctrl.s
    sig = 0.1 + 0.02 * (np.linalg.norm(s) - 2.0 * 0.1)
    assert np.isclose(ctrl.sigma_hat, sig)
    assert np.allclose(tau, C.control_input(s, np.zeros(8), np.zeros(8), np.zeros(8), sig, ctrl.gains))
