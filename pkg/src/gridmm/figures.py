"""Figure rendering for the CLI report paths.

Every report that writes delimited output also renders a PNG next to
it.  Rendering uses the non-interactive Agg backend so it works in
headless environments.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_map_statistics(stats: list[dict], path: str | Path) -> None:
    """Side length and densest-cell population over an episode's steps."""
    steps = [row["step"] for row in stats]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(steps, [row["side_length_m"] for row in stats], marker="o")
    ax1.set_xlabel("step")
    ax1.set_ylabel("map side length (m)")
    ax1.grid(True, alpha=0.3)
    ax2.plot(steps, [row["max_cell_population"] for row in stats], marker="o", color="tab:orange")
    ax2.set_xlabel("step")
    ax2.set_ylabel("max features per cell")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_flops_sweep(rows: list[dict], x_key: str, path: str | Path) -> None:
    """Cached vs uncached GFLOPs curves over a sweep axis."""
    xs = [row[x_key] for row in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.plot(xs, [row["cached_gflops"] for row in rows], marker="o", label="with cache")
    ax.plot(xs, [row["uncached_gflops"] for row in rows], marker="s", label="without cache")
    ax.set_xlabel(x_key.replace("_", " "))
    ax.set_ylabel("GFLOPs")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_history(history: list[dict], path: str | Path) -> None:
    """Loss curves plus held-out navigation metrics."""
    epochs = [row["epoch"] for row in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [row["sap"] for row in history], label="action loss")
    ax1.plot(epochs, [row["her"] for row in history], label="history loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(True, alpha=0.3)
    evaluated = [row for row in history if row["sr"] == row["sr"]]  # drop NaN rows
    ax2.plot([r["epoch"] for r in evaluated], [r["sr"] for r in evaluated],
             marker="o", label="SR")
    ax2.plot([r["epoch"] for r in evaluated], [r["spl"] for r in evaluated],
             marker="s", label="SPL")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out metric")
    ax2.set_ylim(0, 1)
    ax2.legend()
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
