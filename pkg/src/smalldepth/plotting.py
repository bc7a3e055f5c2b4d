"""Figure rendering for CLI reports (files only, no display)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_complexity(report, path) -> None:
    """Per-site parameter and FLOP bars, colored by subgraph."""
    rows = report.rows
    names = [r.name for r in rows]
    colors = {"encoder": "tab:blue", "decoder": "tab:orange", "heads": "tab:green"}
    c = [colors.get(r.subgraph, "tab:gray") for r in rows]
    fig, axes = plt.subplots(2, 1, figsize=(max(8, len(rows) * 0.18), 7), sharex=True)
    x = np.arange(len(rows))
    axes[0].bar(x, [r.param / 1e3 for r in rows], color=c)
    axes[0].set_ylabel("params (K)")
    axes[1].bar(x, [r.flops / 1e6 for r in rows], color=c)
    axes[1].set_ylabel("MFLOPs")
    axes[1].set_xticks(x)
    axes[1].set_xticklabels(names, rotation=90, fontsize=5)
    handles = [plt.Rectangle((0, 0), 1, 1, color=v) for v in colors.values()]
    axes[0].legend(handles, list(colors), fontsize=7)
    h, w = report.input_hw
    axes[0].set_title(f"per-site cost at {h}x{w}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curve(values, path, ylabel: str = "loss", title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(values)), values, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if min(values) > 0:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_depth(m: np.ndarray, path, cmap: str = "magma", label: str = "") -> None:
    m = np.asarray(m)
    while m.ndim > 2:
        m = m[0]
    fig, ax = plt.subplots(figsize=(6, 6 * m.shape[0] / max(m.shape[1], 1) + 0.6))
    im = ax.imshow(m, cmap=cmap)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.03, label=label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(per_frame: dict[str, dict[str, float]], path) -> None:
    """Error metrics and accuracy thresholds per frame."""
    frames = list(per_frame)
    errs = ("abs_rel", "sq_rel", "rmse", "rmse_log")
    accs = ("a1", "a2", "a3")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(frames))
    width = 0.8 / len(errs)
    for j, k in enumerate(errs):
        axes[0].bar(x + j * width, [per_frame[f][k] for f in frames], width, label=k)
    width = 0.8 / len(accs)
    for j, k in enumerate(accs):
        axes[1].bar(x + j * width, [per_frame[f][k] for f in frames], width, label=k)
    for ax, title in zip(axes, ("errors (lower is better)", "threshold accuracy")):
        ax.set_xticks(x + 0.3)
        ax.set_xticklabels(frames, rotation=45, fontsize=7)
        ax.set_title(title)
        ax.legend(fontsize=7)
    axes[1].set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
