"""Static plot files (Agg backend only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_loss(history, path, window: int = 100) -> None:
    steps = np.array([h[0] for h in history])
    loss = np.array([h[1] for h in history])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, loss, lw=0.5, alpha=0.4, label="per step")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("weighted loss")
    ax.set_yscale("log")
    ax.legend()
    _save(fig, path)


def plot_ablation(summary: dict[str, tuple[list, list, list]], path) -> None:
    """``summary[rule] = (N values, mean accuracy, std)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rule, (ns, mean, std) in summary.items():
        std = [0.0 if s is None else s for s in std]
        ax.errorbar(ns, 100 * np.array(mean), yerr=100 * np.array(std), marker="o", capsize=3, label=rule)
    ax.set_xscale("log")
    ax.set_xlabel("classification steps N")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    _save(fig, path)


def plot_coverage(fractions, accuracy, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(100 * np.asarray(fractions), 100 * np.asarray(accuracy), marker="o")
    ax.invert_xaxis()
    ax.set_xlabel("retained samples (%)")
    ax.set_ylabel("accuracy on retained (%)")
    _save(fig, path)


def plot_outcomes(groups: dict[str, np.ndarray], path) -> None:
    names = [k for k, v in groups.items() if len(v)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if names:
        ax.boxplot([groups[k] for k in names])
        ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("vote entropy (bits)")
    _save(fig, path)


def plot_triptych(image: np.ndarray, counterfactual: np.ndarray, difference: np.ndarray,
                  path, title: str = "") -> None:
    """Input, counterfactual and signed difference, first channel of each."""
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    lim = float(np.abs(difference).max()) or 1.0
    panels = ((image, "input", "gray", -1, 1), (counterfactual, "counterfactual", "gray", -1, 1),
              (difference, "difference", "RdBu_r", -lim, lim))
    for ax, (img, name, cmap, lo, hi) in zip(axes, panels):
        shown = ax.imshow(img[0], cmap=cmap, vmin=lo, vmax=hi)
        ax.set_title(name)
        ax.axis("off")
    fig.colorbar(shown, ax=axes[2], fraction=0.046)
    if title:
        fig.suptitle(title)
    _save(fig, path)
