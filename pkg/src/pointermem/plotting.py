"""Figures for the CLI report paths.

Rendering uses the non-interactive Agg backend, so this works headless.
Only the CLI imports this module, and only when a figure is requested.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_fuse_bench", "plot_loss_curve"]


def _column(rows, key):
    return [r[key] if isinstance(r, Mapping) else getattr(r, key) for r in rows]


def plot_fuse_bench(series: Mapping[str, Sequence], path) -> Path:
    """Pointer count and per-frame time against frame index.

    Args:
        series: label -> rows carrying ``frame``, ``pointers`` and ``ms``
            (dicts or records). Several labels share the axes.
        path: output image; the format follows the suffix.
    """
    fig, (ax_n, ax_t) = plt.subplots(1, 2, figsize=(9, 3.4))
    for label, rows in series.items():
        frames = _column(rows, "frame")
        ax_n.plot(frames, _column(rows, "pointers"), label=label)
        ax_t.plot(frames, _column(rows, "ms"), label=label)
    ax_n.set_xlabel("frame")
    ax_n.set_ylabel("pointers in memory")
    ax_t.set_xlabel("frame")
    ax_t.set_ylabel("time per frame [ms]")
    ax_t.set_ylim(bottom=0)
    if len(series) > 1:
        ax_n.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curve(curve: Sequence[float], path, parts: Mapping[str, Sequence[float]] | None = None) -> Path:
    """Training loss per step on a log axis, with optional component curves."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    steps = range(len(curve))
    ax.plot(steps, curve, label="total", color="k")
    for name, values in (parts or {}).items():
        ax.plot(steps, values, label=name, lw=1)
    if min(curve) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if parts:
        ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
