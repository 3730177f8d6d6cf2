"""Report figures rendered to SVG files next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import windowed_curves

_PANELS = (("reward", "reward / step"),
           ("violation_rate", "violation rate"),
           ("correction_ratio", "correction ratio"))


def learning_curves_figure(traces_by_method: dict, path, n_windows: int = 40) -> Path:
    """Three stacked panels (reward, violations, corrections) over training
    steps; solid line is the seed mean, band is the seed min/max."""
    path = Path(path)
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    for method, traces in traces_by_method.items():
        curves = [windowed_curves(t, n_windows) for t in traces]
        steps = curves[0]["step"]
        for ax, (key, _) in zip(axes, _PANELS):
            stack = np.stack([c[key] for c in curves])
            mean = stack.mean(axis=0)
            ax.plot(steps, mean, label=method)
            if len(curves) > 1:
                ax.fill_between(steps, stack.min(axis=0), stack.max(axis=0), alpha=0.2)
    for ax, (_, ylabel) in zip(axes, _PANELS):
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
    axes[0].legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("environment step")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def ablation_figure(rows: list[dict], path) -> Path:
    """ACR / AVR / ARR against the safety threshold, one line per method.

    ``rows`` carry keys: method, epsilon, acr, avr, arr.
    """
    path = Path(path)
    methods = sorted({r["method"] for r in rows})
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for metric, ax in zip(("acr", "avr", "arr"), axes):
        for method in methods:
            pts = sorted((r["epsilon"], r[metric]) for r in rows if r["method"] == method)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        ax.set_xlabel("epsilon_safe")
        ax.set_ylabel(metric.upper())
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
