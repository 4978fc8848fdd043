"""Matplotlib renderers used by the report stage; every function writes a PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_KERNEL_COLORS = {
    "pcn": "tab:blue",
    "mala": "tab:cyan",
    "mmala": "tab:red",
    "dis_mmala": "tab:olive",
    "la_pcn": "tab:green",
    "surrogate_mmala": "tab:purple",
    "da_surrogate_mmala": "tab:orange",
}


def _color(name: str):
    return _KERNEL_COLORS.get(name.split("@")[0], None)


def save_field(field: np.ndarray, grid_n: int, path: str | Path, title: str = "",
               cmap: str = "viridis"):
    """Heatmap of a nodal field on the interior grid."""
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(np.asarray(field).reshape(grid_n, grid_n), origin="lower",
                   extent=(0, 1, 0, 1), cmap=cmap)
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def save_ess_violin(ess_by_kernel: dict, path: str | Path, cap: float = 150.0):
    """Violin plot of the per-DoF ESS% distribution for each kernel."""
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(ess_by_kernel), 3.8))
    labels, data = [], []
    for name, ess in ess_by_kernel.items():
        vals = np.asarray(ess)
        vals = vals[np.isfinite(vals)]
        labels.append(name)
        data.append(np.clip(vals, 0.0, cap))
    if data:
        parts = ax.violinplot(data, showmedians=True)
        for body, name in zip(parts["bodies"], labels):
            c = _color(name)
            if c:
                body.set_facecolor(c)
    ax.set_xticks(np.arange(1, len(labels) + 1), labels, rotation=20, ha="right")
    ax.set_ylabel("ESS% per DoF")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def save_mpsrf_curves(curves: dict, path: str | Path):
    """Wasserstein PSRF versus chain position, one line per kernel."""
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    for name, (pos, vals) in curves.items():
        ax.loglog(pos, vals, marker="o", ms=3, label=name, color=_color(name))
    ax.set_xlabel("chain position")
    ax.set_ylabel("Wasserstein PSRF")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def save_speedup_curves(curves: dict, path: str | Path):
    """Total sampling speedup versus requested effective samples."""
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    for label, (grid, vals) in curves.items():
        ax.semilogx(grid, vals, label=label)
    ax.axhline(1.0, color="k", lw=0.8, ls="--", label="break even")
    ax.set_xlabel("effective samples collected")
    ax.set_ylabel("total speedup")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def save_training_history(histories: dict, path: str | Path):
    """Validation-loss curves for each trained surrogate."""
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    for label, hist in histories.items():
        ax.semilogy(hist["val_loss"], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def save_generalization(errors: dict, path: str | Path):
    """Observable / Jacobian relative errors per surrogate as grouped bars."""
    labels = list(errors)
    obs = [errors[k][0] for k in labels]
    jac = [errors[k][1] for k in labels]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(1.8 + 1.1 * len(labels), 3.8))
    ax.bar(x - 0.2, obs, width=0.4, label="observable")
    ax.bar(x + 0.2, jac, width=0.4, label="Jacobian")
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylabel("relative error")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def save_misfit_trace(traces: dict, path: str | Path):
    """Data-misfit traces along chains, one panel shared by all kernels."""
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    for name, misfits in traces.items():
        ax.plot(misfits, lw=0.7, alpha=0.8, label=name, color=_color(name))
    ax.set_xlabel("chain position")
    ax.set_ylabel("data misfit")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
