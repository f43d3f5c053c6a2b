"""Report figures rendered to image files (non-interactive backend)."""

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


def plot_cost_curve(log, path) -> Path:
    """Accepted cost per iteration, one line per stage, on a log axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    stages = list(dict.fromkeys(r.stage for r in log))
    offset = 0
    for st in stages:
        recs = [r for r in log if r.stage == st and r.accepted]
        if not recs:
            continue
        x = offset + np.array([r.iteration for r in recs])
        ax.plot(x, [r.cost for r in recs], marker="o", ms=3, label=st)
        offset = x[-1] + 1
    ax.set_yscale("log")
    ax.set_xlabel("iteration (cumulative)")
    ax.set_ylabel("total cost")
    if stages:
        ax.legend()
    return _save(fig, path)


def plot_landmark_costs(costs, path, bins: int = 50) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    c = np.asarray(costs if costs is not None else [], dtype=float)
    c = c[np.isfinite(c)]
    if c.size:
        ax.hist(c, bins=bins)
    ax.set_xlabel("mean cost per block")
    ax.set_ylabel("landmarks")
    return _save(fig, path)


def plot_ablation(rows, path, metric: str = "landmark_rmse") -> Path:
    """Bar chart of one metric per variant; ``rows`` are dicts with ``variant``."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["variant"] for r in rows]
    vals = [float(r.get(metric, np.nan)) for r in rows]
    ax.bar(names, vals)
    ax.set_ylabel(metric)
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
