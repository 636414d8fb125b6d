"""Figures written next to the comma-separated reports.

matplotlib is optional; :func:`available` tells the CLI whether figures
can be rendered. Files are PNG without a Software tag so reruns are
byte-identical.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
COLORS = {"raw": "#7f7f7f", "mbkf": "#1f77b4", "deepkalpose": "#d62728"}


def available() -> bool:
    try:
        import matplotlib  # noqa: F401
    except ImportError:
        return False
    return True


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def depth_curves(curves: dict[str, np.ndarray], path, title: str | None = None) -> Path:
    """ARED mean (line) and +/- one standard deviation (band) against distance."""
    plt = _pyplot()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for method, curve in curves.items():
            if len(curve) == 0:
                continue
            c, m, v = curve[:, 0], 100 * curve[:, 1], 100 * np.sqrt(curve[:, 2])
            color = COLORS.get(method)
            ax.plot(c, m, marker="o", ms=3, lw=1.2, color=color, label=method)
            ax.fill_between(c, m - v, m + v, color=color, alpha=0.2, lw=0)
        ax.set_xlabel("distance to camera [m]")
        ax.set_ylabel("ARED [%]")
        ax.set_ylim(bottom=0)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        out = _save(fig, path)
        plt.close(fig)
    return out


def loss_curve(curve: np.ndarray, path, window: int = 50) -> Path:
    plt = _pyplot()
    curve = np.asarray(curve, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        it = np.arange(1, len(curve) + 1)
        ax.plot(it, curve, lw=0.6, color="#bbbbbb", label="batch")
        if len(curve) >= window:
            smooth = np.convolve(curve, np.ones(window) / window, mode="valid")
            ax.plot(it[window - 1:], smooth, lw=1.2, color="#d62728", label=f"{window}-iter mean")
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        out = _save(fig, path)
        plt.close(fig)
    return out
