"""Quadrotor + planar 2R arm as an Euler-Lagrange system with payload regimes.

Coordinates are ``chi = [x, y, z, phi, theta, psi, a1, a2]`` with z up.  The
plant is actuated directly by the generalized force ``tau`` (motor mixing is
not modelled).  Every array function accepts an optional leading batch axis.

The learning target is the residual ``H = tau - Mbar @ chi_ddot``: everything
the nominal diagonal inertia ``Mbar`` does not explain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

NQ = 8
TRAINING_PAYLOADS = (0.0, 0.2, 0.4)
EVALUATION_PAYLOADS = (0.3, 0.5)
DEFAULT_DT = 0.01
DIVERGENCE_LIMIT = 1e6
FD_STEP = 1e-6


class ConfigurationRejected(RuntimeError):
    """The inertia matrix is not positive definite at this configuration."""


class SimulationDiverged(RuntimeError):
    def __init__(self, step_index: int, detail: str = ""):
        super().__init__(f"simulation diverged at step {step_index}{': ' + detail if detail else ''}")
        self.step_index = step_index


class RegimeContractViolation(ValueError):
    pass


def _vec(value, n=NQ) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (n,))
    return arr.copy()


@dataclass(frozen=True)
class PlantParams:
    m_b: float = 2.4
    m_1: float = 0.2
    m_2: float = 0.2
    l_1: float = 0.18
    l_2: float = 0.18
    l_c1: float = 0.09
    l_c2: float = 0.09
    # Effective joint inertias, reflected actuator inertia included.
    I_1: float = 0.15
    I_2: float = 0.15
    J: tuple[float, float, float] = (0.03, 0.03, 0.05)
    g_0: float = 9.81
    D_lin: tuple[float, ...] = (0.05, 0.05, 0.05, 0.01, 0.01, 0.01, 0.01, 0.01)
    D_quad: tuple[float, ...] = (0.02, 0.02, 0.02, 0.0, 0.0, 0.0, 0.0, 0.0)
    tau_w: float = 0.5
    sigma_w: float = 0.05
    M_bar: tuple[float, ...] = (2.0, 2.0, 2.0, 0.02, 0.02, 0.02, 0.05, 0.05)

    def __post_init__(self):
        positive = [self.m_b, self.l_1, self.l_2, self.I_1, self.I_2, *self.J, self.tau_w]
        if min(positive) <= 0 or min(self.m_1, self.m_2) < 0:
            raise ValueError("masses, lengths and inertias must be positive")
        if self.l_c1 > self.l_1 or self.l_c2 > self.l_2:
            raise ValueError("link CoM offset exceeds link length")
        if len(self.D_lin) != NQ or len(self.D_quad) != NQ or len(self.M_bar) != NQ:
            raise ValueError("per-coordinate vectors must have 8 entries")
        if min(self.M_bar) <= 0:
            raise ValueError("nominal inertia must be positive definite")
        if self.sigma_w < 0:
            raise ValueError("disturbance intensity must be non-negative")

    @property
    def nominal_inertia(self) -> np.ndarray:
        return np.diag(self.M_bar)

    def total_mass(self, m_p: float = 0.0) -> float:
        return self.m_b + self.m_1 + self.m_2 + m_p

    def conservative(self) -> "PlantParams":
        """Gravity, drag and the stochastic disturbance switched off."""
        return replace(self, g_0=0.0, D_lin=(0.0,) * NQ, D_quad=(0.0,) * NQ, sigma_w=0.0)


def _arm_terms(m_p, p: PlantParams):
    m_p = np.asarray(m_p, dtype=np.float64)
    mu1 = p.m_1 * p.l_c1 + (p.m_2 + m_p) * p.l_1
    mu2 = p.m_2 * p.l_c2 + m_p * p.l_2
    a1 = p.I_1 + p.m_1 * p.l_c1**2 + (p.m_2 + m_p) * p.l_1**2
    a2 = p.I_2 + p.m_2 * p.l_c2**2 + m_p * p.l_2**2
    a3 = (p.m_2 * p.l_c2 + m_p * p.l_2) * p.l_1
    return mu1, mu2, a1, a2, a3


def inertia_matrix(chi, m_p, p: PlantParams) -> np.ndarray:
    """Configuration- and payload-dependent inertia, shape (..., 8, 8)."""
    chi = np.asarray(chi, dtype=np.float64)
    m_p = np.asarray(m_p, dtype=np.float64)
    if np.any(m_p < 0):
        raise ValueError("payload mass must be non-negative")
    batch = np.broadcast_shapes(chi.shape[:-1], m_p.shape)
    a_1, a_2 = chi[..., 6], chi[..., 7]
    mu1, mu2, a1, a2, a3 = _arm_terms(m_p, p)
    c1, s1 = np.cos(a_1), np.sin(a_1)
    c12, s12 = np.cos(a_1 + a_2), np.sin(a_1 + a_2)
    c2 = np.cos(a_2)
    m_tot = p.total_mass(m_p)

    M = np.zeros(batch + (NQ, NQ))
    for i in range(3):
        M[..., i, i] = m_tot
    for i in range(3):
        M[..., 3 + i, 3 + i] = p.J[i]
    # Base/arm coupling acts on the x and z rows only.
    M[..., 0, 6] = mu1 * c1 + mu2 * c12
    M[..., 0, 7] = mu2 * c12
    M[..., 2, 6] = mu1 * s1 + mu2 * s12
    M[..., 2, 7] = mu2 * s12
    M[..., 6, 0] = M[..., 0, 6]
    M[..., 7, 0] = M[..., 0, 7]
    M[..., 6, 2] = M[..., 2, 6]
    M[..., 7, 2] = M[..., 2, 7]
    M[..., 6, 6] = a1 + a2 + 2.0 * a3 * c2
    M[..., 6, 7] = a2 + a3 * c2
    M[..., 7, 6] = M[..., 6, 7]
    M[..., 7, 7] = a2
    return M


def inertia_derivatives(chi, m_p, p: PlantParams, h: float = FD_STEP) -> np.ndarray:
    """dM/dchi_j by central differences, shape (..., 8 [j], 8, 8)."""
    chi = np.asarray(chi, dtype=np.float64)
    eye = np.eye(NQ) * h
    plus = chi[..., None, :] + eye
    minus = chi[..., None, :] - eye
    m_p = np.asarray(m_p, dtype=np.float64)[..., None]
    return (inertia_matrix(plus, m_p, p) - inertia_matrix(minus, m_p, p)) / (2.0 * h)


def coriolis_matrix(chi, chid, m_p, p: PlantParams) -> np.ndarray:
    """C(chi, chid) built from Christoffel symbols of the first kind."""
    dM = inertia_derivatives(chi, m_p, p)  # [..., k, i, j] = dM_ij/dq_k
    chid = np.asarray(chid, dtype=np.float64)
    # Gamma_ijk = 0.5 (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i); C_ij = sum_k Gamma_ijk qd_k
    t1 = np.einsum("...kij,...k->...ij", dM, chid)
    t2 = np.einsum("...jik,...k->...ij", dM, chid)
    t3 = np.einsum("...ijk,...k->...ij", dM, chid)
    return 0.5 * (t1 + t2 - t3)


def coriolis_times_qdot(chi, chid, m_p, p: PlantParams) -> np.ndarray:
    dM = inertia_derivatives(chi, m_p, p)
    chid = np.asarray(chid, dtype=np.float64)
    mdot = np.einsum("...kij,...k->...ij", dM, chid)
    quad = np.einsum("...kij,...i,...j->...k", dM, chid, chid)
    return np.einsum("...ij,...j->...i", mdot, chid) - 0.5 * quad


def gravity_vector(chi, m_p, p: PlantParams) -> np.ndarray:
    chi = np.asarray(chi, dtype=np.float64)
    m_p = np.asarray(m_p, dtype=np.float64)
    batch = np.broadcast_shapes(chi.shape[:-1], m_p.shape)
    mu1, mu2, *_ = _arm_terms(m_p, p)
    a_1, a_2 = chi[..., 6], chi[..., 7]
    c1, c12 = np.cos(a_1), np.cos(a_1 + a_2)
    g = np.zeros(batch + (NQ,))
    g[..., 2] = p.total_mass(m_p) * p.g_0
    g[..., 6] = mu1 * p.g_0 * c1 + mu2 * p.g_0 * c12
    g[..., 7] = mu2 * p.g_0 * c12
    return g


def drag(chid, p: PlantParams) -> np.ndarray:
    chid = np.asarray(chid, dtype=np.float64)
    return np.asarray(p.D_lin) * chid + np.asarray(p.D_quad) * chid * np.abs(chid)


def disturbance_step(chid, w, dt: float, rng: np.random.Generator | None, p: PlantParams):
    """Return (d, w_next): drag plus Ornstein-Uhlenbeck state, and the OU update."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = np.asarray(w, dtype=np.float64)
    d = drag(chid, p) + w
    decay = np.exp(-dt / p.tau_w)
    w_next = w * decay
    if p.sigma_w > 0:
        if rng is None:
            raise ValueError("a random generator is required when sigma_w > 0")
        w_next = w_next + p.sigma_w * np.sqrt(1.0 - decay * decay) * rng.standard_normal(w.shape)
    return d, w_next


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(a) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def _solve_pd(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationRejected("inertia matrix is not positive definite") from exc
    y = np.linalg.solve(L, rhs[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def acceleration(chi, chid, m_p, tau, d, p: PlantParams) -> np.ndarray:
    """chi_ddot = M^-1 (tau - C chid - g - d)."""
    M = inertia_matrix(chi, m_p, p)
    rhs = np.asarray(tau) - coriolis_times_qdot(chi, chid, m_p, p) - gravity_vector(chi, m_p, p) - d
    return _solve_pd(M, rhs)


def rk4_step(chi, chid, m_p, tau, d, dt: float, p: PlantParams):
    """Classical RK4 over (chi, chid) with tau and d held constant.

    Returns (chi_next, chid_next, chi_ddot at the initial state).
    """

    def f(q, qd):
        return qd, acceleration(q, qd, m_p, tau, d, p)

    k1q, k1v = f(chi, chid)
    k2q, k2v = f(chi + 0.5 * dt * k1q, chid + 0.5 * dt * k1v)
    k3q, k3v = f(chi + 0.5 * dt * k2q, chid + 0.5 * dt * k2v)
    k4q, k4v = f(chi + dt * k3q, chid + dt * k3v)
    chi_n = chi + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    chid_n = chid + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return chi_n, chid_n, k1v


def residual(tau, chi_ddot, p: PlantParams) -> np.ndarray:
    return np.asarray(tau) - np.asarray(chi_ddot) * np.asarray(p.M_bar)


# ---------------------------------------------------------------------------
# Value types for single-plant use.


@dataclass(frozen=True)
class GeneralizedState:
    chi: np.ndarray
    chid: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls) -> "GeneralizedState":
        return cls(np.zeros(NQ), np.zeros(NQ), 0.0)


def regime_label(level: float, attached: bool) -> str:
    return f"{level:.1f}kg-{'attached' if attached else 'detached'}"


@dataclass(frozen=True)
class RegimeState:
    """Payload and disturbance state.

    ``level`` is the payload the episode handles; ``m_p`` is ``level`` while
    attached and 0 otherwise.
    """

    level: float = 0.0
    attached: bool = False
    w: np.ndarray = field(default_factory=lambda: np.zeros(NQ))

    @property
    def m_p(self) -> float:
        return self.level if self.attached else 0.0

    @property
    def label(self) -> str:
        return regime_label(self.level, self.attached)

    @property
    def out_of_distribution(self) -> bool:
        return not any(abs(self.level - m) < 1e-12 for m in TRAINING_PAYLOADS)


def payload_event(regime: RegimeState, event: str, mass: float | None = None) -> RegimeState:
    """Apply ``attach`` (with ``mass``) or ``detach``; mass steps instantly."""
    if event == "attach":
        if regime.attached:
            raise RegimeContractViolation("attach while a payload is already attached")
        if mass is None or mass < 0:
            raise RegimeContractViolation("attach needs a non-negative mass")
        return replace(regime, level=float(mass), attached=True)
    if event == "detach":
        if not regime.attached:
            raise RegimeContractViolation("detach with no payload attached")
        return replace(regime, attached=False)
    raise RegimeContractViolation(f"unknown payload event {event!r}")


@dataclass(frozen=True)
class StepOutput:
    state: GeneralizedState
    chi_ddot: np.ndarray
    H: np.ndarray
    regime: RegimeState
    d: np.ndarray


def check_finite_state(chi, chid, step_index: int) -> None:
    if not (np.all(np.isfinite(chi)) and np.all(np.isfinite(chid))):
        raise SimulationDiverged(step_index, "non-finite state")
    if np.max(np.abs(chi)) > DIVERGENCE_LIMIT or np.max(np.abs(chid)) > DIVERGENCE_LIMIT:
        raise SimulationDiverged(step_index, "state magnitude above 1e6")


def step(
    state: GeneralizedState,
    regime: RegimeState,
    tau,
    p: PlantParams,
    dt: float = DEFAULT_DT,
    rng: np.random.Generator | None = None,
    step_index: int = 0,
) -> StepOutput:
    """Advance one plant step; the residual refers to the step's initial state."""
    tau = np.asarray(tau, dtype=np.float64)
    d, w_next = disturbance_step(state.chid, regime.w, dt, rng, p)
    chi_n, chid_n, chi_ddot = rk4_step(state.chi, state.chid, regime.m_p, tau, d, dt, p)
    chi_n = chi_n.copy()
    chi_n[6:8] = wrap_angle(chi_n[6:8])
    check_finite_state(chi_n, chid_n, step_index)
    return StepOutput(
        state=GeneralizedState(chi_n, chid_n, state.t + dt),
        chi_ddot=chi_ddot,
        H=residual(tau, chi_ddot, p),
        regime=replace(regime, w=w_next),
        d=d,
    )
