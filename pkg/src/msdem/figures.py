"""Figure rendering for the command-line report path.

Everything here draws to files through the Agg backend; nothing opens a
window. The numeric tables stay the source of truth, figures are a
convenience view of the same data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_forgetting_curves(curves: dict[int, list[float]], path) -> None:
    """One line per task: its test accuracy as later tasks arrive."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for task_id in sorted(curves):
        values = curves[task_id]
        xs = list(range(task_id, task_id + len(values)))
        ax.plot(xs, values, marker="o", markersize=3, linewidth=1.2, label=f"task {task_id}")
    ax.set_xlabel("tasks seen")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    if len(curves) <= 12:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_matrix_heatmap(matrix: np.ndarray, path, title: str, mask_upper: bool = True) -> None:
    """Square heatmap; entries above the diagonal are blanked when masked."""
    shown = np.array(matrix, dtype=np.float64, copy=True)
    if mask_upper:
        shown[np.triu_indices_from(shown, k=1)] = np.nan
    n = shown.shape[0]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * n + 2), max(3.5, 0.5 * n + 1.5)))
    im = ax.imshow(shown, cmap="viridis", vmin=np.nanmin(shown), vmax=np.nanmax(shown))
    ax.set_title(title)
    ax.set_xlabel("earlier task")
    ax.set_ylabel("task")
    ax.set_xticks(range(n), [str(i + 1) for i in range(n)], fontsize=7)
    ax.set_yticks(range(n), [str(i + 1) for i in range(n)], fontsize=7)
    if n <= 16:
        for i in range(n):
            for j in range(i + 1):
                ax.text(j, i, f"{shown[i, j]:.2f}", ha="center", va="center", fontsize=6, color="w")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_feature_map(projected: np.ndarray, labels: np.ndarray, path, title: str) -> None:
    """2-D scatter of projected feature vectors coloured by integer label."""
    if projected.ndim != 2 or projected.shape[1] != 2:
        raise ValueError(f"expected an [n, 2] projection, got {projected.shape}")
    fig, ax = plt.subplots(figsize=(6, 5))
    groups = np.unique(labels)
    cmap = plt.get_cmap("tab20")
    for i, g in enumerate(groups):
        pick = labels == g
        ax.scatter(
            projected[pick, 0],
            projected[pick, 1],
            s=6,
            color=cmap(i % 20),
            label=str(g),
            alpha=0.7,
            linewidths=0,
        )
    ax.set_title(title)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    if len(groups) <= 24:
        ax.legend(fontsize=6, markerscale=2, ncol=2, title="task")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
