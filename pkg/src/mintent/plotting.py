"""Figures written next to the CSV reports (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import SweepPoint, Trajectory  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(curves: Mapping[str, Sequence[SweepPoint]], path: str | Path) -> Path:
    """Precision (solid) and recall (dashed) against the decision threshold, one colour per variant."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (name, points) in enumerate(curves.items()):
        tau = [p.threshold for p in points]
        color = f"C{i}"
        ax.plot(tau, [float(p.precision) for p in points], color=color, label=f"{name} precision")
        ax.plot(tau, [float(p.recall) for p in points], color=color, linestyle="--", label=f"{name} recall")
    ax.set_xlabel("decision threshold")
    ax.set_ylabel("score")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_trajectories(curves: Mapping[str, Trajectory], path: str | Path, threshold: float | None = 0.5) -> Path:
    """Onset-aligned median probability with interquartile bands."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (name, traj) in enumerate(curves.items()):
        color = f"C{i}"
        ax.plot(traj.t_rel, traj.median, color=color, label=f"{name} (n={traj.n_sequences})")
        ax.fill_between(traj.t_rel, traj.q25, traj.q75, color=color, alpha=0.2)
    ax.axvline(0, color="k", linewidth=0.8)
    if threshold is not None:
        ax.axhline(threshold, color="gray", linestyle=":", linewidth=0.8)
    ax.set_xlabel("frames relative to intent onset")
    ax.set_ylabel("intent probability")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_loss_log(rows: Sequence[Mapping], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    """Per-epoch curves of the numeric columns in a loss log (log scale when all positive)."""
    if not rows:
        raise ValueError("empty loss log")
    columns = columns or [k for k, v in rows[0].items() if k != "epoch" and isinstance(v, (int, float))]
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    positive = True
    for name in columns:
        values = np.asarray([float(r[name]) for r in rows])
        if np.all(np.isnan(values)):
            continue
        positive &= bool(np.nanmin(values) > 0)
        ax.plot(epochs, values, label=name)
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_summary(rows: Sequence[Mapping], path: str | Path, metrics: Sequence[str]) -> Path:
    """Grouped bars of per-variant means with SD error bars."""
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(metrics) * max(len(rows), 1) / 2), 4))
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(metrics))
    for i, row in enumerate(rows):
        means = [float(row[f"{m}_mean"]) for m in metrics]
        sds = [float(row[f"{m}_sd"]) for m in metrics]
        ax.bar(x + i * width, means, width, yerr=sds, capsize=2, label=row["variant"])
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(metrics, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    return _save(fig, path)
