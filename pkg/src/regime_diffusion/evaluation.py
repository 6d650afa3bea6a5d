"""Prediction metrics and embedding diagnostics."""

from __future__ import annotations

import numpy as np

from .dataset import RESID_DIM, stack_segments
from .nncore import ContractViolation

CHANNEL_GROUPS = {"Position": (0, 1, 2), "Attitude": (3, 4, 5), "Manipulator": (6, 7)}


def channel_rmse(pred, truth) -> np.ndarray:
    err = np.asarray(pred) - np.asarray(truth)
    return np.sqrt(np.mean(err.reshape(-1, RESID_DIM) ** 2, axis=0))


def group_rmse(pred, truth) -> dict[str, float]:
    """RMSE pooled over the channels of each group."""
    mse = channel_rmse(pred, truth) ** 2
    return {g: float(np.sqrt(mse[list(idx)].mean())) for g, idx in CHANNEL_GROUPS.items()}


class OraclePredictor:
    """Returns the plant-truth residual; validates the metric harness."""

    name = "oracle"

    def predict_segments(self, segments, rng=None) -> np.ndarray:
        return np.stack([s.H[0] for s in segments])


def predict_segments(model, segments, rng: np.random.Generator, chunk: int = 1024) -> np.ndarray:
    """First-step residual prediction for every segment, shape (N, 8)."""
    if hasattr(model, "predict_segments"):
        return model.predict_segments(segments, rng)
    out = []
    for lo in range(0, len(segments), chunk):
        b = stack_segments(segments[lo : lo + chunk])
        out.append(np.asarray(model.predict_from_history(b.hist_zeta, b.hist_tau, rng)))
    return np.concatenate(out) if out else np.zeros((0, RESID_DIM))


def sample_windows(model, segments, rng: np.random.Generator, chunk: int = 1024) -> np.ndarray:
    """Full predicted residual windows (N, S, 8) from a generative model."""
    out = []
    for lo in range(0, len(segments), chunk):
        b = stack_segments(segments[lo : lo + chunk])
        out.append(model.sample(b.hist_zeta, b.hist_tau, rng))
    return np.concatenate(out)


def iqr(values) -> tuple[float, float]:
    q25, q75 = np.percentile(np.asarray(values, dtype=np.float64), [25, 75])
    return float(q25), float(q75)


def iqr_separated(lower, upper) -> bool:
    """True when the interquartile range of ``lower`` lies strictly below that of ``upper``."""
    return iqr(lower)[1] < iqr(upper)[0]


# ---------------------------------------------------------------------------
# Embedding diagnostics


def pca(X, n_components: int = 2):
    """Principal components via the covariance eigen-decomposition.

    Returns (projections (N, n), components (n, D), explained variance ratio (n,)).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ContractViolation("PCA needs at least three samples")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    comps = evecs[:, :n_components].T
    # Fix the sign so each component's largest loading is positive.
    flip = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    comps = comps * flip[:, None]
    total = evals.sum()
    ratio = evals[:n_components] / total if total > 0 else np.zeros(n_components)
    return Xc @ comps.T, comps, ratio


def separation_ratio(points, labels) -> float:
    """Mean pairwise distance between regime centroids over mean within-regime spread."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    groups = [points[labels == g] for g in np.unique(labels)]
    if len(groups) < 2:
        raise ContractViolation("separation needs at least two regimes")
    cents = np.stack([g.mean(axis=0) for g in groups])
    within = np.mean(np.concatenate([np.linalg.norm(g - c, axis=1) for g, c in zip(groups, cents)]))
    diffs = cents[:, None] - cents[None]
    iu = np.triu_indices(len(cents), k=1)
    between = np.mean(np.linalg.norm(diffs, axis=-1)[iu])
    return float(between / max(within, 1e-12))


def error_histogram(errors, bins: int = 40, limit: float | None = None):
    """Histogram of per-sample residual-error norms: (edges, counts)."""
    e = np.asarray(errors, dtype=np.float64)
    mags = np.linalg.norm(e.reshape(len(e), -1), axis=1)
    hi = limit if limit is not None else float(mags.max()) if len(mags) else 1.0
    counts, edges = np.histogram(mags, bins=bins, range=(0.0, max(hi, 1e-12)))
    return edges, counts
