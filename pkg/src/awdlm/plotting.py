"""Figures for the LR range test and training curves (written to files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .schedule import LrFinderTrace  # noqa: E402
from .train import EpochRecord  # noqa: E402


def plot_lr_trace(trace: LrFinderTrace, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(trace.lrs, trace.losses, color="tab:blue")
    ax.axvline(trace.suggested_lr, color="tab:red", linestyle="--",
               label=f"suggested {trace.suggested_lr:.3g}")
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("smoothed loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training(history: Sequence[EpochRecord], path: str | Path) -> None:
    epochs = list(range(1, len(history) + 1))
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    left.plot(epochs, [r.train_loss for r in history], marker="o")
    left.set_xlabel("epoch")
    left.set_ylabel("train loss (nats/token)")
    right.plot(epochs, [r.valid_ppl for r in history], marker="o", color="tab:orange")
    right.set_xlabel("epoch")
    right.set_ylabel("validation perplexity")
    # mark where phase 2 starts
    first2 = next((i for i, r in enumerate(history) if r.phase == 2), None)
    if first2 is not None and first2 > 0:
        for ax in (left, right):
            ax.axvline(first2 + 0.5, color="grey", linestyle=":")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
