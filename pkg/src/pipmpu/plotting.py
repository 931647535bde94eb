"""Figures for the footprint and accessible-ratio reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metadata import DEFAULT_CONSTANTS, KernelConstants, compute_footprint, max_blocks  # noqa: E402


def plot_footprint(path: Path, marks: Sequence[tuple[str, int]] = (),
                   k: KernelConstants = DEFAULT_CONSTANTS) -> Path:
    """Step curve of metadata bytes against registered blocks, with optional
    labelled points for individual partitions."""
    blocks = list(range(1, max_blocks(k) + 1))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.step(blocks, [compute_footprint(b, k) for b in blocks], where="post", color="tab:blue")
    grouped: dict[int, list[str]] = {}
    for name, b in marks:
        grouped.setdefault(b, []).append(name)
    for b, names in grouped.items():
        y = compute_footprint(b, k)
        name = ", ".join(names)
        ax.plot([b], [y], "o", color="tab:red")
        ax.annotate(name, (b, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("blocks registered")
    ax.set_ylabel("metadata footprint (B)")
    ax.set_xlim(0, max_blocks(k) + 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ratios(path: Path, rows: Sequence[tuple[str, float, float]]) -> Path:
    """Grouped bars of accessible flash and RAM percentage per partition."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 3.5))
    xs = range(len(rows))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], [r[1] for r in rows], width, label="flash")
    ax.bar([x + width / 2 for x in xs], [r[2] for r in rows], width, label="RAM")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r[0] for r in rows])
    ax.set_ylabel("accessible (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
