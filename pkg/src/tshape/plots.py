"""Reproducible SVG line charts."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def line_chart(xs: Sequence[float], series: Mapping[str, Sequence[float]], xlabel: str, ylabel: str,
               path: str | Path) -> None:
    with plt.rc_context({"svg.hashsalt": "tshape", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name in sorted(series):
            ax.plot(list(xs), list(series[name]), marker="o", label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
