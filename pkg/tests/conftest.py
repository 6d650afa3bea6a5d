"""Shared fixtures: small synthetic episodes and the two-regime toy problem."""

from __future__ import annotations

import numpy as np
import pytest

from regime_diffusion import dataset as D
from regime_diffusion.plant import PlantParams

TOY_DIRECTION = np.linspace(1.0, -1.0, D.RESID_DIM)
_CRITERIA: list[str] = []


def two_regime_segments(n: int, seed: int, S: int = 8, L: int = 10, shift: float = 2.0, noise: float = 0.05):
    """Segments whose residual is +c or -c depending on a hidden regime.

    The current state and previous input are pure noise in both regimes, so
    only the earlier history (an offset on the first input channel) reveals
    which sign applies.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        hist_zeta = rng.standard_normal((L + 1, D.STATE_DIM))
        hist_tau = rng.standard_normal((L + 1, D.INPUT_DIM))
        hist_tau[:-1, 0] += shift * sign
        H = sign * TOY_DIRECTION + noise * rng.standard_normal((S, D.RESID_DIM))
        out.append(
            D.Segment(
                zeta=np.zeros((S, D.STATE_DIM)),
                tau=np.zeros((S, D.INPUT_DIM)),
                H=H,
                hist_zeta=hist_zeta,
                hist_tau=hist_tau,
                label="plus" if sign > 0 else "minus",
                episode=0,
                start=i,
            )
        )
    return out


@pytest.fixture(scope="session")
def params():
    return PlantParams()


@pytest.fixture(scope="session")
def short_episodes(params):
    """Six 1.5 s episodes across two payload levels."""
    return [
        D.collect_episode(params, 1.5, payload, seed, schedule="pickdrop")
        for payload in (0.0, 0.4)
        for seed in range(3)
    ]


@pytest.fixture(scope="session")
def short_segments(short_episodes):
    return D.segment(short_episodes, 8, 2, 10)


@pytest.fixture(scope="session")
def short_normalizer(short_segments):
    return D.fit_normalizer(short_segments)


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line per acceptance criterion; returns the verdict."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        print(line)
        _CRITERIA.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
