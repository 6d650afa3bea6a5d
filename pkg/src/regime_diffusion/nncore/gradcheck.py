"""Central finite-difference checks along random directions."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, forward_backward


def directional_check(
    loss_fn: Callable[[], Tensor],
    params: list[Tensor],
    rng: np.random.Generator,
    probes: int = 100,
    step: float = 1e-5,
) -> float:
    """Largest relative error between tape and finite-difference derivatives.

    Each probe perturbs every parameter along one random Gaussian direction,
    scaled to unit norm over all parameters jointly, and compares the
    directional derivative from the tape with the central difference of the
    loss.
    """
    _, grads = forward_backward(loss_fn, params)
    base = [p.data.copy() for p in params]
    worst = 0.0
    try:
        for _ in range(probes):
            dirs = [rng.standard_normal(p.shape) for p in params]
            norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float(np.sum(grads[p.name] * d)) for p, d in zip(params, dirs))
            for p, b, d in zip(params, base, dirs):
                p.data = b + step * d
            f_plus = float(loss_fn().data)
            for p, b, d in zip(params, base, dirs):
                p.data = b - step * d
            f_minus = float(loss_fn().data)
            numeric = (f_plus - f_minus) / (2.0 * step)
            scale = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / scale)
    finally:
        for p, b in zip(params, base):
            p.data = b
    return worst
