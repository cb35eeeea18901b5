"""Figures written next to the delimited run outputs.

Kept apart from :mod:`tgaml.metrics` so the numeric code has no plotting
dependency at import time.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_roc(fpr: Sequence[float], tpr: Sequence[float], auc: float, path: str | Path,
             title: str = "ROC") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr, lw=1.8, label=f"AUC = {auc:.4f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="false positive rate", ylabel="true positive rate", title=title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history: Sequence[dict], path: str | Path, metric: str = "f1") -> None:
    """Loss curves of both phases plus the validation selection metric."""
    plt = _pyplot()
    epochs = np.array([h["epoch"] for h in history])
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.6))
    left.plot(epochs, [h["phase1_loss"] for h in history], label="phase 1")
    left.plot(epochs, [h["phase2_loss"] for h in history], label="phase 2")
    left.plot(epochs, [h["validation"].get("loss", np.nan) for h in history], label="validation")
    left.set(xlabel="epoch", ylabel="loss")
    left.legend()
    right.plot(epochs, [h["validation"].get(metric, np.nan) for h in history], color="tab:green")
    right.set(xlabel="epoch", ylabel=f"validation {metric}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
