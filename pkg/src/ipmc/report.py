"""Figure rendering for the CLI report paths (matplotlib, file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_history_figure(rows: list[dict], path) -> Path:
    """Loss curves (total / pair / alignment) plus per-epoch transfers."""
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for key, label in (
        ("loss_total", "total"),
        ("loss_unisap", "pair loss"),
        ("loss_da", "alignment"),
    ):
        ax.plot(epochs, [r[key] for r in rows], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    transfers = [r.get("transfers", 0) for r in rows]
    if any(transfers):
        twin = ax.twinx()
        twin.plot(epochs, transfers, color="gray", alpha=0.5, linestyle="--")
        twin.set_ylabel("transfers", color="gray")
    return _finish(fig, path)


def save_ablation_figure(rows: list[dict], path) -> Path:
    """Bar chart of probe accuracy (and view separability) per variant."""
    variants = [r["variant"] for r in rows]
    acc = [float(r["probe_accuracy"]) for r in rows]
    disc = [float(r["view_discriminability"]) for r in rows]
    x = np.arange(len(variants))
    fig, ax = plt.subplots(figsize=(6.4, 4))
    ax.bar(x - 0.18, acc, width=0.36, label="probe accuracy")
    ax.bar(x + 0.18, disc, width=0.36, label="view separability")
    ax.set_xticks(x, variants)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(loc="lower right")
    return _finish(fig, path)


def save_embedding_figure(coords: np.ndarray, labels: np.ndarray, path) -> Path:
    """Scatter of 2-D embedding coordinates colored by class label."""
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    scatter = ax.scatter(
        coords[:, 0], coords[:, 1], c=labels, s=8, cmap="tab10", alpha=0.8
    )
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.colorbar(scatter, ax=ax, label="label")
    return _finish(fig, path)
