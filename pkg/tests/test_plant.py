import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_diffusion import plant as P


def random_configs(rng, n):
    chi = np.zeros((n, P.NQ))
    chi[:, :3] = rng.uniform(-3, 3, (n, 3))
    chi[:, 3:5] = rng.uniform(-0.6, 0.6, (n, 2))
    chi[:, 5:] = rng.uniform(-np.pi, np.pi, (n, 3))
    return chi


def energy(chi, chid, m_p, p):
    M = P.inertia_matrix(chi, m_p, p)
    return 0.5 * chid @ M @ chid


def test_inertia_symmetric_and_positive_definite(params):
    rng = np.random.default_rng(0)
    chi = random_configs(rng, 2000)
    m_p = rng.uniform(0, 0.5, 2000)
    M = P.inertia_matrix(chi, m_p, params)
    assert np.array_equal(M, np.swapaxes(M, -1, -2))
    np.linalg.cholesky(M)


def test_batched_inertia_matches_single(params):
    rng = np.random.default_rng(1)
    chi = random_configs(rng, 5)
    m_p = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
    batch = P.inertia_matrix(chi, m_p, params)
    for i in range(5):
        assert np.allclose(batch[i], P.inertia_matrix(chi[i], m_p[i], params), atol=0, rtol=0)


def test_skew_symmetry_of_mdot_minus_2c(params):
    rng = np.random.default_rng(2)
    for _ in range(50):
        chi = random_configs(rng, 1)[0]
        chid = rng.standard_normal(P.NQ)
        dM = P.inertia_derivatives(chi, 0.2, params)
        Mdot = np.einsum("kij,k->ij", dM, chid)
        C = P.coriolis_matrix(chi, chid, 0.2, params)
        assert abs(chid @ (Mdot - 2 * C) @ chid) < 1e-6 * (chid @ chid)
        assert np.allclose(C @ chid, P.coriolis_times_qdot(chi, chid, 0.2, params), atol=1e-10)


def test_gravity_is_potential_gradient(params):
    """Oracle: potential m g z plus the arm's centre-of-mass heights."""
    rng = np.random.default_rng(3)
    mu1, mu2, *_ = P._arm_terms(0.3, params)

    def potential(q):
        return params.g_0 * (params.total_mass(0.3) * q[2] + mu1 * np.sin(q[6]) + mu2 * np.sin(q[6] + q[7]))

    for _ in range(20):
        q = random_configs(rng, 1)[0]
        grad = np.array([(potential(q + h) - potential(q - h)) / 2e-6 for h in np.eye(P.NQ) * 1e-6])
        assert np.allclose(P.gravity_vector(q, 0.3, params), grad, atol=1e-6)


def test_kinetic_energy_conserved_without_forces(params):
    p = params.conservative()
    rng = np.random.default_rng(4)
    chi = random_configs(rng, 1)[0]
    chid = 0.5 * rng.standard_normal(P.NQ)
    e0 = energy(chi, chid, 0.2, p)
    T = 5.0
    for _ in range(int(T / 0.01)):
        chi, chid, _ = P.rk4_step(chi, chid, 0.2, np.zeros(P.NQ), np.zeros(P.NQ), 0.01, p)
    assert abs(energy(chi, chid, 0.2, p) - e0) / T < 1e-6


def test_residual_identity(params):
    rng = np.random.default_rng(5)
    chi = random_configs(rng, 1)[0]
    chid = rng.standard_normal(P.NQ)
    tau = 5 * rng.standard_normal(P.NQ)
    d = rng.standard_normal(P.NQ)
    chidd = P.acceleration(chi, chid, 0.4, tau, d, params)
    H = P.residual(tau, chidd, params)
    M = P.inertia_matrix(chi, 0.4, params)
    rhs = (M - params.nominal_inertia) @ chidd + P.coriolis_times_qdot(chi, chid, 0.4, params)
    rhs += P.gravity_vector(chi, 0.4, params) + d
    assert np.allclose(H, rhs, atol=1e-9, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range_and_equivalence(a):
    w = float(P.wrap_angle(a))
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a), atol=1e-7) and np.isclose(np.sin(w), np.sin(a), atol=1e-7)


def test_step_wraps_arm_angles_and_reports_residual(params):
    state = P.GeneralizedState(np.r_[np.zeros(6), np.pi - 1e-3, 0.0], np.r_[np.zeros(6), 1.0, 0.0])
    regime = P.RegimeState()
    out = P.step(state, regime, np.zeros(P.NQ), params.conservative(), dt=0.01)
    assert -np.pi < out.state.chi[6] <= np.pi
    assert np.allclose(out.H, -np.asarray(params.M_bar) * out.chi_ddot)


def test_payload_events():
    r = P.RegimeState(level=0.2)
    assert r.m_p == 0.0
    r = P.payload_event(r, "attach", 0.2)
    assert r.m_p == 0.2 and r.label == "0.2kg-attached"
    with pytest.raises(P.RegimeContractViolation):
        P.payload_event(r, "attach", 0.2)
    r = P.payload_event(r, "detach")
    with pytest.raises(P.RegimeContractViolation):
        P.payload_event(r, "detach")
    assert P.RegimeState(level=0.5).out_of_distribution
    assert not P.RegimeState(level=0.4).out_of_distribution


def test_payload_raises_vertical_residual(params):
    """Hovering with the nominal thrust, extra mass shows up as extra H_z."""
    chi = np.r_[0, 0, 1.5, 0, 0, 0, 0.3, 0.2]
    tau = P.gravity_vector(chi, 0.0, params)
    H = [P.residual(tau, P.acceleration(chi, np.zeros(8), m, tau, np.zeros(8), params), params) for m in (0.0, 0.3)]
    assert np.allclose(H[0], tau, atol=1e-12)
    assert H[1][2] > H[0][2] + 1.0


def test_ou_disturbance_statistics():
    p = P.PlantParams(D_lin=(0.0,) * 8, D_quad=(0.0,) * 8)
    rng = np.random.default_rng(6)
    w = np.zeros((4000, P.NQ))
    samples = []
    for _ in range(400):
        _, w = P.disturbance_step(np.zeros(P.NQ), w, 0.01, rng, p)
        samples.append(w[:, 0].copy())
    # Stationary std is sigma_w; the lag-one correlation is exp(-dt / tau_w).
    assert abs(np.std(samples[-1]) - p.sigma_w) < 0.1 * p.sigma_w
    r = np.corrcoef(samples[-2], samples[-1])[0, 1]
    assert abs(r - np.exp(-0.01 / p.tau_w)) < 0.01


def test_divergence_detected():
    with pytest.raises(P.SimulationDiverged):
        P.check_finite_state(np.full(8, np.nan), np.zeros(8), 3)
    with pytest.raises(P.SimulationDiverged):
        P.check_finite_state(np.zeros(8), np.full(8, 2e6), 3)


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        P.PlantParams(m_b=-1.0)
    with pytest.raises(ValueError):
        P.PlantParams(l_c1=0.5)
