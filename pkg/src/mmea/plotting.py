"""Figures written next to the CSV/JSON reports (Agg backend, no display)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _axes(width: float = 5.0):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path, title: str = "") -> Path:
    """Train and validation loss per epoch on a log axis."""
    fig, ax = _axes()
    ep = [r["epoch"] for r in history]
    tr = [r["train_loss"] for r in history]
    va = [r["valid_loss"] for r in history]
    ax.plot(ep, va, "o-", ms=3, label="validation")
    if any(np.isfinite(tr)):
        ax.plot(ep, tr, "s--", ms=3, label="train")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_overhead(ranks, median_s, q1_s, q3_s, fit, path) -> Path:
    fig, ax = _axes()
    r = np.asarray(ranks, dtype=float)
    med = 1e3 * np.asarray(median_s)
    err = [med - 1e3 * np.asarray(q1_s), 1e3 * np.asarray(q3_s) - med]
    ax.errorbar(r, med, yerr=err, fmt="o", capsize=3, label="median (IQR)")
    if fit.slope is not None:
        xs = np.linspace(0, r.max() * 1.05, 50)
        ax.plot(xs, 1e3 * (fit.slope * xs + fit.intercept), "-", label=f"linear fit, R$^2$={fit.r2:.3f}")
    ax.set_xlabel("rank r")
    ax.set_ylabel("adapter pass time (ms)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_parity(reference, predicted, path, label: str = "force component", unit: str = "eV/A") -> Path:
    fig, ax = _axes(4.0)
    ref = np.ravel(reference)
    pred = np.ravel(predicted)
    lo, hi = float(min(ref.min(), pred.min())), float(max(ref.max(), pred.max()))
    ax.plot([lo, hi], [lo, hi], "k-", lw=0.8)
    ax.plot(ref, pred, ".", ms=2, alpha=0.6)
    ax.set_xlabel(f"reference {label} ({unit})")
    ax.set_ylabel(f"predicted {label} ({unit})")
    ax.set_aspect("equal")
    return _save(fig, path)


def plot_method_bars(names: Sequence[str], values: Sequence[float], path, ylabel: str) -> Path:
    fig, ax = _axes()
    ax.bar(range(len(names)), values, color="0.6")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel(ylabel)
    return _save(fig, path)
