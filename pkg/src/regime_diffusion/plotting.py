"""Report figures, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curve(rows, path, title: str = "") -> Path:
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, [r[1] for r in rows], label="train")
    ax.plot(steps, [r[2] for r in rows], label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def group_rmse_bars(table: dict[str, dict[str, float]], path) -> Path:
    """``table[model][group]`` -> grouped bar chart."""
    models = list(table)
    groups = list(next(iter(table.values())))
    x = np.arange(len(groups))
    width = 0.8 / max(len(models), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, m in enumerate(models):
        ax.bar(x + i * width, [table[m][g] for g in groups], width, label=m)
    ax.set_xticks(x + width * (len(models) - 1) / 2)
    ax.set_xticklabels(groups)
    ax.set_ylabel("RMSE")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, path)


def tracking_grid(cells: dict[str, dict[str, float]], path) -> Path:
    """``cells[cell][model]`` mean position RMSE."""
    return group_rmse_bars({m: {c: cells[c][m] for c in cells} for m in next(iter(cells.values()))}, path)


def trajectories(ref_xy, runs: dict[str, np.ndarray], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ref_xy[:, 0], ref_xy[:, 1], "k--", lw=1, label="reference")
    for name, xy in runs.items():
        ax.plot(xy[:, 0], xy[:, 1], lw=1, label=name)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    return _save(fig, path)


def traces(t, series: dict[str, np.ndarray], path, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    for name, y in series.items():
        ax.plot(t, y, lw=1, label=name)
    ax.set_xlabel("t [s]")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, path)


def pca_scatter(points, labels, path, title: str = "") -> Path:
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 4))
    for lab in np.unique(labels):
        sel = labels == lab
        ax.scatter(points[sel, 0], points[sel, 1], s=4, alpha=0.5, label=str(lab))
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title(title)
    ax.legend(fontsize=7, markerscale=3)
    return _save(fig, path)


def histograms(hists: dict[str, tuple[np.ndarray, np.ndarray]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, (edges, counts) in hists.items():
        centres = 0.5 * (edges[:-1] + edges[1:])
        ax.plot(centres, counts / max(counts.sum(), 1), lw=1.2, label=name)
    ax.set_xlabel("prediction error norm")
    ax.set_ylabel("fraction")
    ax.legend(fontsize=8)
    return _save(fig, path)
