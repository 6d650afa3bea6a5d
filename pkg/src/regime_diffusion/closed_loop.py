"""Closed-loop runner: learned residual + adaptive controller on the simulated plant.

Per control tick the runner reads the reference, reads feedback, updates the
history buffer, predicts the residual (zero until the buffer is full), forms
the tracking error and sliding variable, adapts the gain, and then holds the
new input over the plant substeps.  Several trials run side by side along a
batch axis; each trial keeps its own disturbance generator.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import plant as P
from .controller import (
    ControllerGains,
    LyapunovMonitor,
    adapt_step,
    control_input,
    lyapunov_value,
    sliding_variable,
    tracking_error,
)
from .scenario import PROXIMITY

LYAPUNOV_TOL = 1e-3
LYAPUNOV_PASS_FRACTION = 0.99


class Trace:
    """Records the ordered operations of each tick (for fidelity checks)."""

    def __init__(self):
        self.events: list[tuple[int, str]] = []

    def __call__(self, tick: int, op: str) -> None:
        self.events.append((tick, op))

    def ops(self, tick: int) -> list[str]:
        return [op for i, op in self.events if i == tick]


class BatchHistory:
    """History buffer of (zeta, tau_prev) pairs shared across a batch of trials."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._zeta: deque = deque(maxlen=capacity)
        self._tau: deque = deque(maxlen=capacity)

    def push(self, zeta, tau_prev) -> None:
        self._zeta.append(np.array(zeta, dtype=np.float64))
        self._tau.append(np.array(tau_prev, dtype=np.float64))

    @property
    def fill(self) -> int:
        return len(self._zeta)

    @property
    def is_full(self) -> bool:
        return self.fill == self.capacity

    def arrays(self):
        """(B, fill, 16) and (B, fill, 8), oldest first."""
        return np.stack(self._zeta, axis=-2), np.stack(self._tau, axis=-2)


@dataclass
class ClosedLoopLog:
    t: np.ndarray
    chi: np.ndarray
    chi_ref: np.ndarray
    e: np.ndarray
    s: np.ndarray
    sigma_hat: np.ndarray
    tau: np.ndarray
    H_hat: np.ndarray
    H: np.ndarray
    fill: np.ndarray
    gated: np.ndarray


@dataclass
class ClosedLoopResult:
    model: str
    seeds: list[int]
    log: ClosedLoopLog
    warmup_ticks: int
    diverged: dict[int, dict] = field(default_factory=dict)
    forced_events: list[tuple[int, str]] = field(default_factory=list)

    def position_rmse(self) -> np.ndarray:
        """Per-trial sqrt of the time-mean squared Euclidean position error (meters)."""
        e = self.log.e[:, :, :3]
        return np.sqrt(np.mean(np.sum(e * e, axis=-1), axis=0))

    def channel_rmse(self) -> np.ndarray:
        return np.sqrt(np.mean(self.log.e**2, axis=0))

    def sigma_m(self) -> np.ndarray:
        """Measured worst residual-estimation error after warm-up, per trial."""
        err = self.log.H - self.log.H_hat
        return np.max(np.linalg.norm(err[self.warmup_ticks :], axis=-1), axis=0)

    def lyapunov(self, gains: ControllerGains, dt: float, tol: float = LYAPUNOV_TOL) -> list[dict]:
        out = []
        for b, sm in enumerate(self.sigma_m()):
            V = lyapunov_value(self.log.s[:, b], self.log.sigma_hat[:, b], float(sm), gains)
            out.append(LyapunovMonitor(gains, float(sm), tol).check(V[self.warmup_ticks :], dt))
        return out


def _initial_state(ref, rng: np.random.Generator, radius: float):
    chi, chid = ref.chi.copy(), ref.chid.copy()
    if radius > 0:
        v = rng.standard_normal(3)
        chi[:3] += v / np.linalg.norm(v) * radius * rng.uniform()
    return chi, chid


def run_closed_loop(
    scenario,
    predictor,
    seeds,
    params: P.PlantParams | None = None,
    gains: ControllerGains | None = None,
    L: int = 10,
    dt: float = P.DEFAULT_DT,
    substeps: int = 2,
    sample_seed: int = 0,
    init_radius: float = 0.05,
    duration: float | None = None,
    trace: Trace | None = None,
) -> ClosedLoopResult:
    """Run one trial per seed on ``scenario`` with residual estimates from ``predictor``."""
    params = params or P.PlantParams()
    gains = gains or ControllerGains()
    seeds = list(seeds)
    B = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    sample_rng = np.random.default_rng(sample_seed)
    trace = trace or (lambda tick, op: None)
    control_dt = dt * substeps
    n_ticks = int(round((duration or scenario.duration) / control_dt))

    r0 = scenario.reference(0.0)
    init = [_initial_state(r0, r, init_radius) for r in rngs]
    chi = np.stack([c for c, _ in init])
    chid = np.stack([v for _, v in init])
    w = np.zeros((B, P.NQ))
    m_p = np.zeros(B)
    fired = np.zeros((B, len(scenario.events)), dtype=bool)
    alive = np.ones(B, dtype=bool)
    sigma_hat = np.full(B, gains.sigma0)
    history = BatchHistory(L + 1)
    tau = np.zeros((B, P.NQ))
    zeta_prev = None

    shape = (n_ticks, B)
    log = ClosedLoopLog(
        t=np.arange(n_ticks) * control_dt,
        chi=np.zeros(shape + (P.NQ,)),
        chi_ref=np.zeros((n_ticks, P.NQ)),
        e=np.zeros(shape + (P.NQ,)),
        s=np.zeros(shape + (P.NQ,)),
        sigma_hat=np.zeros(shape),
        tau=np.zeros(shape + (P.NQ,)),
        H_hat=np.zeros(shape + (P.NQ,)),
        H=np.zeros(shape + (P.NQ,)),
        fill=np.zeros(n_ticks, dtype=int),
        gated=np.zeros(n_ticks, dtype=bool),
    )
    result = ClosedLoopResult(getattr(predictor, "name", "model"), seeds, log, warmup_ticks=0)
    warmup = None

    for i in range(n_ticks):
        t = i * control_dt
        ref = scenario.reference(t)
        trace(i, "reference")
        zeta = np.concatenate([chi, chid], axis=-1)
        trace(i, "feedback")
        # Every plant sample since the last tick enters the buffer, each with
        # the input that was applied when it was produced.
        for z in zeta_prev or []:
            history.push(z, tau)
        history.push(zeta, tau)
        zeta_prev = []
        trace(i, "buffer_update")
        if history.is_full:
            hz, ht = history.arrays()
            H_hat = np.asarray(predictor.predict_from_history(hz, ht, sample_rng))
            trace(i, "predict")
        else:
            H_hat = np.zeros((B, P.NQ))
            log.gated[i] = True
            trace(i, "gate_zero")
        if warmup is None and history.is_full:
            warmup = i
        log.fill[i] = history.fill
        e, e_dot = tracking_error(chi, chid, ref)
        s = sliding_variable(e, e_dot, gains.phi)
        trace(i, "error")
        sigma_hat = adapt_step(sigma_hat, np.linalg.norm(s, axis=-1), gains.nu, control_dt)
        trace(i, "adapt")
        tau = control_input(s, e_dot, ref.chidd, H_hat, sigma_hat, gains)
        tau = np.where(alive[:, None], tau, 0.0)
        trace(i, "control")

        log.chi[i], log.chi_ref[i] = chi, ref.chi
        log.e[i], log.s[i], log.sigma_hat[i] = e, s, sigma_hat
        log.tau[i], log.H_hat[i] = tau, H_hat

        for k in range(substeps):
            t_sub = t + k * dt
            for j, ev in enumerate(scenario.events):
                near = np.linalg.norm(chi[:, :3] - ev.point, axis=-1) <= PROXIMITY
                in_window = ev.t_open <= t_sub < ev.t_close
                due = ~fired[:, j] & ((in_window & near) | (t_sub >= ev.t_close))
                for b in np.flatnonzero(due):
                    if not (in_window and near[b]):
                        result.forced_events.append((seeds[b], ev.kind))
                    m_p[b] = scenario.payload if ev.kind == "attach" else 0.0
                    fired[b, j] = True
            d = np.zeros((B, P.NQ))
            w_next = np.zeros_like(w)
            for b in range(B):
                d[b], w_next[b] = P.disturbance_step(chid[b], w[b], dt, rngs[b], params)
            chi_n, chid_n, chidd = P.rk4_step(chi, chid, m_p, tau, d, dt, params)
            if k == 0:
                log.H[i] = P.residual(tau, chidd, params)
            chi_n[:, 6:8] = P.wrap_angle(chi_n[:, 6:8])
            bad = ~np.all(np.isfinite(chi_n) & np.isfinite(chid_n), axis=-1) | (
                np.max(np.abs(np.concatenate([chi_n, chid_n], axis=-1)), axis=-1) > P.DIVERGENCE_LIMIT
            )
            for b in np.flatnonzero(bad & alive):
                lo = max(0, i - 99)
                result.diverged[seeds[b]] = {
                    "tick": i,
                    "t": float(t_sub),
                    "last_ticks": {
                        "t": log.t[lo : i + 1].tolist(),
                        "e": log.e[lo : i + 1, b].tolist(),
                        "tau": log.tau[lo : i + 1, b].tolist(),
                        "H_hat": log.H_hat[lo : i + 1, b].tolist(),
                    },
                }
                alive[b] = False
            keep = alive[:, None]
            chi = np.where(keep, chi_n, chi)
            chid = np.where(keep, chid_n, chid)
            w = np.where(keep, w_next, w)
            if k < substeps - 1:
                zeta_prev.append(np.concatenate([chi, chid], axis=-1))
        trace(i, "plant")

    result.warmup_ticks = warmup if warmup is not None else n_ticks
    return result


# ---------------------------------------------------------------------------
# Oracle-residual loop for the ultimate-boundedness check.


@dataclass(frozen=True)
class HoverReference:
    """Constant reference: level hover at ``point`` with the arm tucked."""

    point: tuple[float, float, float] = (0.0, 0.0, 1.5)
    joints: tuple[float, float] = (0.0, np.pi / 2)

    def __call__(self, t: float):
        from .dataset import ReferenceSample

        chi = np.zeros(P.NQ)
        chi[:3], chi[6:] = self.point, self.joints
        return ReferenceSample(chi, np.zeros(P.NQ), np.zeros(P.NQ))


class BandLimitedError:
    """Zero-mean random-phase sinusoids with |sigma(t)| <= bound for all t."""

    def __init__(self, rng: np.random.Generator, bound: float, n_sines: int = 4, band=(0.5, 5.0)):
        self.freq = rng.uniform(band[0], band[1], size=(P.NQ, n_sines))
        self.phase = rng.uniform(0, 2 * np.pi, size=(P.NQ, n_sines))
        amp = rng.uniform(0.5, 1.0, size=(P.NQ, n_sines))
        worst = np.sqrt(np.sum(amp.sum(axis=1) ** 2))
        self.amp = amp * bound / worst

    def __call__(self, t: float) -> np.ndarray:
        return np.sum(self.amp * np.sin(2 * np.pi * self.freq * t + self.phase), axis=1)


def run_oracle_loop(
    seeds,
    sigma_bound: float = 0.5,
    duration: float = 60.0,
    e0_radius: float = 1.0,
    params: P.PlantParams | None = None,
    gains: ControllerGains | None = None,
    dt: float = P.DEFAULT_DT,
    substeps: int = 2,
    reference: HoverReference | None = None,
) -> ClosedLoopResult:
    """Closed loop whose residual estimate is exact up to an injected bounded error.

    The estimate solves the algebraic loop between the input and the residual
    so that M_bar s_dot = -Lambda s - switching + sigma holds at each tick.
    """
    params = params or P.PlantParams()
    gains = gains or ControllerGains()
    reference = reference or HoverReference()
    seeds = list(seeds)
    B = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    errors = [BandLimitedError(r, sigma_bound) for r in rngs]
    control_dt = dt * substeps
    n_ticks = int(round(duration / control_dt))
    ref = reference(0.0)

    chi = np.repeat(ref.chi[None], B, axis=0)
    for b, r in enumerate(rngs):
        v = r.standard_normal(P.NQ)
        chi[b] += v / np.linalg.norm(v) * e0_radius * r.uniform() ** (1 / P.NQ)
    chid = np.zeros((B, P.NQ))
    w = np.zeros((B, P.NQ))
    m_p = np.zeros(B)
    sigma_hat = np.full(B, gains.sigma0)
    shape = (n_ticks, B)
    log = ClosedLoopLog(
        t=np.arange(n_ticks) * control_dt,
        chi=np.zeros(shape + (P.NQ,)),
        chi_ref=np.repeat(ref.chi[None], n_ticks, axis=0),
        e=np.zeros(shape + (P.NQ,)),
        s=np.zeros(shape + (P.NQ,)),
        sigma_hat=np.zeros(shape),
        tau=np.zeros(shape + (P.NQ,)),
        H_hat=np.zeros(shape + (P.NQ,)),
        H=np.zeros(shape + (P.NQ,)),
        fill=np.zeros(n_ticks, dtype=int),
        gated=np.zeros(n_ticks, dtype=bool),
    )
    for i in range(n_ticks):
        t = i * control_dt
        ref = reference(t)
        e, e_dot = tracking_error(chi, chid, ref)
        s = sliding_variable(e, e_dot, gains.phi)
        sigma_hat = adapt_step(sigma_hat, np.linalg.norm(s, axis=-1), gains.nu, control_dt)
        u = control_input(s, e_dot, ref.chidd, np.zeros((B, P.NQ)), sigma_hat, gains)
        sig = np.stack([err(t) for err in errors])
        d = np.zeros((B, P.NQ))
        w_next = np.zeros_like(w)
        for b in range(B):
            d[b], w_next[b] = P.disturbance_step(chid[b], w[b], dt, rngs[b], params)
        M = P.inertia_matrix(chi, m_p, params)
        n = P.coriolis_times_qdot(chi, chid, m_p, params) + P.gravity_vector(chi, m_p, params) + d
        tau = n + np.einsum("bij,bj->bi", M, (u + sig) / gains.M_bar)
        H_hat = tau - u
        log.chi[i], log.e[i], log.s[i], log.sigma_hat[i] = chi, e, s, sigma_hat
        log.tau[i], log.H_hat[i] = tau, H_hat
        for k in range(substeps):
            if k > 0:
                w = w_next
                d = np.zeros((B, P.NQ))
                for b in range(B):
                    d[b], w_next[b] = P.disturbance_step(chid[b], w[b], dt, rngs[b], params)
            chi, chid, chidd = P.rk4_step(chi, chid, m_p, tau, d, dt, params)
            chi[:, 6:8] = P.wrap_angle(chi[:, 6:8])
            if k == 0:
                log.H[i] = P.residual(tau, chidd, params)
        w = w_next
        P.check_finite_state(chi, chid, i)
    return ClosedLoopResult("oracle", seeds, log, warmup_ticks=0)
