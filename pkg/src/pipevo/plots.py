"""PNG figures rendered next to the CSV series (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def bar_chart(path: Path, labels: Sequence[str], values: Sequence[float], ylabel: str, title: str,
              errors: Sequence[float] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(values)), values, yerr=errors, capsize=3, color="#4c72b0")
    ax.set_xticks(range(len(values)), labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path)


def trajectories(path: Path, series: Mapping[str, Sequence[tuple[float, float]]], budget: float | None = None) -> Path:
    """Best-so-far fitness over time, one step line per run."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, points in series.items():
        if not points:
            continue
        t, f = zip(*points)
        end = budget if budget is not None else t[-1]
        ax.step([*t, max(end, t[-1])], [*f, f[-1]], where="post", label=label)
    ax.set_xlabel("elapsed (s)")
    ax.set_ylabel("best CV ROC AUC")
    ax.legend(fontsize="small")
    return _save(fig, path)


def grouped_bars(path: Path, groups: Sequence[str], series: Mapping[str, Sequence[float]], ylabel: str,
                 title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(1, len(series))
    for k, (label, values) in enumerate(series.items()):
        ax.bar([i + k * width for i in range(len(groups))], values, width, label=label)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(groups))], groups)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize="small")
    return _save(fig, path)


def lines_with_reference(path: Path, x: Sequence[float], series: Mapping[str, Sequence[float]],
                         reference: Mapping[str, Sequence[float]], xlabel: str, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, ys in series.items():
        line, = ax.plot(x, ys, marker="o", label=label)
        if label in reference:
            ax.plot(x, reference[label], linestyle="--", color=line.get_color(), alpha=0.6,
                    label=f"{label} (linear)")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    return _save(fig, path)


def stacked_stages(path: Path, labels: Sequence[str], stages: Mapping[str, Sequence[float]], title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bottom = [0.0] * len(labels)
    for name, values in stages.items():
        ax.bar(range(len(labels)), values, bottom=bottom, label=name)
        bottom = [b + v for b, v in zip(bottom, values)]
    ax.set_xticks(range(len(labels)), labels, rotation=20, ha="right")
    ax.set_ylabel("seconds (summed over tasks)")
    ax.set_title(title)
    ax.legend(fontsize="small")
    return _save(fig, path)
