"""Figure rendering for the CLI report paths.

Every renderer writes a PNG next to the corresponding delimited output.
Figures are drawn on the Agg backend with fixed sizes and stripped metadata
so that identical inputs produce identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": None}}


def render_fit_log(step_sizes, loglik_trace, path: str | Path) -> None:
    """Step-size schedule and smoothed stochastic log-likelihood trace."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    t = np.arange(1, len(loglik_trace) + 1)
    axes[0].plot(t, loglik_trace, lw=0.8, color="#1f77b4")
    if len(loglik_trace) >= 20:
        k = min(50, max(5, len(loglik_trace) // 10))
        smooth = np.convolve(loglik_trace, np.ones(k) / k, mode="valid")
        axes[0].plot(np.arange(k, len(loglik_trace) + 1), smooth, lw=1.6, color="#d62728")
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("mean complete-data log density")
    axes[0].set_title("fit trace")
    axes[1].plot(t, step_sizes, lw=1.0, color="#2ca02c")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("step size")
    axes[1].set_title("step schedule")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def render_selection(names, pi_by_nu: dict, eta: float, path: str | Path) -> None:
    """Selection frequencies per variable, one bar series per nominal level."""
    nus = sorted(pi_by_nu)
    p = len(names)
    order = np.argsort(-np.asarray(pi_by_nu[nus[0]]))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.35 * p), 3.6))
    width = 0.8 / len(nus)
    x = np.arange(p)
    for k, nu in enumerate(nus):
        pi = np.asarray(pi_by_nu[nu])[order]
        ax.bar(x + k * width, pi, width=width, label=f"nu={nu}")
    ax.axhline(eta, color="#d62728", lw=1.0, ls="--", label=f"eta={eta:g}")
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([names[i] for i in order], rotation=90, fontsize=7)
    ax.set_ylabel("selection frequency")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def render_table1(rows, path: str | Path) -> None:
    """PFER and TPR against the nominal level, per method and sample size."""
    rows = list(rows)
    n_values = sorted({r["N"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    markers = {"baseline": "o", "drm": "s"}
    for n in n_values:
        for method in ("baseline", "drm"):
            sub = sorted(
                (r for r in rows if r["N"] == n and r["method"] == method),
                key=lambda r: r["nu"],
            )
            if not sub:
                continue
            nus = [r["nu"] for r in sub]
            label = f"{method} N={n}"
            axes[0].errorbar(
                nus,
                [r["pfer"] for r in sub],
                yerr=[r["se_pfer"] for r in sub],
                marker=markers[method],
                ms=4,
                lw=1.0,
                label=label,
            )
            axes[1].errorbar(
                nus,
                [100 * r["tpr"] for r in sub],
                yerr=[100 * r["se_tpr"] for r in sub],
                marker=markers[method],
                ms=4,
                lw=1.0,
                label=label,
            )
    lims = [r["nu"] for r in rows]
    if lims:
        grid = sorted(set(lims))
        axes[0].plot(grid, grid, color="grey", lw=0.8, ls=":")
    axes[0].set_xlabel("nominal level")
    axes[0].set_ylabel("mean PFER")
    axes[1].set_xlabel("nominal level")
    axes[1].set_ylabel("mean TPR (%)")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
