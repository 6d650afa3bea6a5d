"""Sliding-variable adaptive controller with smoothed switching and a Lyapunov monitor.

All functions accept a leading batch axis so several trials can share one loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ReferenceSample as Reference
from .plant import NQ, wrap_angle

CONTROL_DT = 0.02

__all__ = [
    "CONTROL_DT",
    "AdaptiveController",
    "ControllerGains",
    "LyapunovMonitor",
    "Reference",
    "adapt_step",
    "control_input",
    "lyapunov_rates",
    "lyapunov_value",
    "sliding_variable",
    "tracking_error",
]


def _diag(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        if np.any(v != np.diag(np.diagonal(v))):
            raise ValueError(f"{name} must be diagonal")
        v = np.diagonal(v).copy()
    if v.shape != (NQ,):
        raise ValueError(f"{name} needs {NQ} diagonal entries, got shape {v.shape}")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be positive definite")
    return v


@dataclass(frozen=True)
class ControllerGains:
    """Diagonal gains stored as vectors."""

    phi: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.5, 1.1, 1.1, 1.0, 1.2, 1.2]))
    lam: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 3.5, 1.5, 1.5, 1.2, 3.0, 3.0]))
    M_bar: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 2.0, 0.02, 0.02, 0.02, 0.05, 0.05]))
    sigma0: float = 0.1
    nu: float = 2.0
    varpi: float = 0.1

    def __post_init__(self):
        for name in ("phi", "lam", "M_bar"):
            object.__setattr__(self, name, _diag(getattr(self, name), name))
        for name in ("sigma0", "nu", "varpi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "phi": self.phi.tolist(),
            "lam": self.lam.tolist(),
            "M_bar": self.M_bar.tolist(),
            "sigma0": self.sigma0,
            "nu": self.nu,
            "varpi": self.varpi,
        }


def tracking_error(chi, chid, ref: Reference):
    """e = chi - chi_d (angles wrapped), e_dot = chid - chid_d."""
    e = np.asarray(chi) - ref.chi
    e[..., 3:] = wrap_angle(e[..., 3:])
    return e, np.asarray(chid) - ref.chid


def sliding_variable(e, e_dot, phi) -> np.ndarray:
    return np.asarray(e_dot) + np.asarray(phi) * np.asarray(e)


def control_input(s, e_dot, chidd_d, H_hat, sigma_hat, gains: ControllerGains) -> np.ndarray:
    """tau = -Lambda s + M_bar (chidd_d - Phi e_dot) + H_hat - sigma_hat s / sqrt(|s|^2 + varpi)."""
    s = np.asarray(s, dtype=np.float64)
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    switching = sigma_hat[..., None] * s / np.sqrt(np.sum(s * s, axis=-1, keepdims=True) + gains.varpi)
    return -gains.lam * s + gains.M_bar * (np.asarray(chidd_d) - gains.phi * np.asarray(e_dot)) + H_hat - switching


def adapt_step(sigma_hat, s_norm, nu: float, dt: float):
    """Explicit Euler step of sigma_hat' = |s| - nu sigma_hat."""
    if not 0 < dt < 1.0 / nu:
        raise ValueError(f"adaptation step dt={dt} must lie in (0, 1/nu) to keep the gain positive")
    return sigma_hat + dt * (s_norm - nu * sigma_hat)


def lyapunov_value(s, sigma_hat, sigma_m: float, gains: ControllerGains):
    """V = s^T M_bar s / 2 + (sigma_hat - sigma_m)^2 / 2."""
    s = np.asarray(s)
    return 0.5 * np.sum(gains.M_bar * s * s, axis=-1) + 0.5 * (np.asarray(sigma_hat) - sigma_m) ** 2


def lyapunov_rates(gains: ControllerGains, sigma_m: float) -> tuple[float, float]:
    """(rho, delta) of the ultimate-bound inequality dV/dt <= -rho V + delta."""
    rho = min(gains.lam.min(), gains.nu / 2) / max(gains.M_bar.min() / 2, 0.5)
    return float(rho), float(gains.nu / 2 * sigma_m**2)


class LyapunovMonitor:
    """Checks the discrete decrease condition tick by tick.

    A tick counts when V at its start lies outside the terminal ball
    V <= delta / (rho - kappa) with kappa = rho / 2.
    """

    def __init__(self, gains: ControllerGains, sigma_m: float, tol: float):
        self.gains, self.sigma_m, self.tol = gains, sigma_m, tol
        self.rho, self.delta = lyapunov_rates(gains, sigma_m)
        self.ball = self.delta / (self.rho / 2)

    def check(self, V: np.ndarray, dt: float) -> dict:
        """``V`` is (T,) or (T, B); returns counts of satisfied ticks outside the ball."""
        V = np.asarray(V, dtype=np.float64)
        rate = np.diff(V, axis=0) / dt
        v0 = V[:-1]
        outside = v0 > self.ball
        ok = rate <= -self.rho * v0 + self.delta + self.tol
        n_out = int(outside.sum())
        n_ok = int((ok & outside).sum())
        return {
            "rho": self.rho,
            "delta": self.delta,
            "ball": self.ball,
            "ticks_outside": n_out,
            "ticks_satisfied": n_ok,
            "fraction": n_ok / n_out if n_out else 1.0,
        }


class AdaptiveController:
    """Stateful controller; batch dimension optional.

    ``update`` follows the loop order: tracking error, sliding variable,
    adaptive gain, then the control input with the updated gain.
    """

    def __init__(self, gains: ControllerGains = None, batch: tuple[int, ...] = (), dt: float = CONTROL_DT):
        self.gains = gains or ControllerGains()
        self.dt = dt
        self.sigma_hat = np.full(batch, self.gains.sigma0)
        self.s = np.zeros(batch + (NQ,))
        self.tau = np.zeros(batch + (NQ,))

    def update(self, chi, chid, ref: Reference, H_hat) -> np.ndarray:
        e, e_dot = tracking_error(chi, chid, ref)
        self.e = e
        self.s = sliding_variable(e, e_dot, self.gains.phi)
        self.sigma_hat = adapt_step(self.sigma_hat, np.linalg.norm(self.s, axis=-1), self.gains.nu, self.dt)
        self.tau = control_input(self.s, e_dot, ref.chidd, H_hat, self.sigma_hat, self.gains)
        return self.tau
