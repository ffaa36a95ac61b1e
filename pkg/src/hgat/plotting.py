"""Static figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_forecast(times, truth, pred, channels: Sequence[str], path, max_channels: int = 4) -> Path:
    """Truth against one-step-ahead prediction for the first few channels.

    ``truth`` and ``pred`` are ``(N, d)`` arrays aligned with ``times``
    (POSIX seconds).
    """
    n = min(max_channels, len(channels))
    hours = (np.asarray(times) - times[0]) / 3600.0
    fig, axes = plt.subplots(n, 1, figsize=(9, 2.2 * n), sharex=True, squeeze=False)
    for i in range(n):
        ax = axes[i, 0]
        ax.plot(hours, truth[:, i], lw=1.0, color="0.2", label="truth")
        ax.plot(hours, pred[:, i], lw=0.8, color="tab:orange", label="forecast")
        ax.set_ylabel(channels[i])
        ax.grid(alpha=0.3)
    axes[0, 0].legend(loc="upper right", fontsize="small")
    axes[-1, 0].set_xlabel("hours since start of split")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path, metric: str = "NRMSE") -> Path:
    """Bar chart of mean x100 error with std error bars, one bar per model."""
    names = [r["model"] for r in rows]
    mean = np.array([np.nan if r[f"{metric}_mean"] is None else r[f"{metric}_mean"] for r in rows])
    std = np.array([0.0 if r.get(f"{metric}_std") is None else r[f"{metric}_std"] for r in rows])
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.2))
    ax.bar(names, mean, yerr=std, capsize=3, color="tab:blue", alpha=0.8)
    ax.set_ylabel(f"{metric} (x100)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history: Sequence[dict], path) -> Path:
    ep = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(ep, [r["train_loss"] for r in history], marker="o", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [r["val_nrmse"] for r in history], marker="s", ms=3, color="tab:red", label="val NRMSE")
    ax2.set_ylabel("val NRMSE")
    fig.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path
