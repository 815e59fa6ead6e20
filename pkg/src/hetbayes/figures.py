"""Rendering of report figures to files, alongside the delimited outputs.

Pure consumers of already-computed report rows; nothing here feeds back into
estimation. PNGs are written without a Software tag so repeated runs are
byte-identical.
"""

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .risk import RegretReport

_METHOD_COLORS = {
    "HET": "tab:blue",
    "HET_FULL": "tab:cyan",
    "HOM": "tab:red",
    "NAIVE": "tab:green",
    "ORACLE": "tab:gray",
}

_SAVEFIG_KW = {"dpi": 120, "metadata": {"Software": None}}


def _method_style(method):
    return {"color": _METHOD_COLORS.get(method, "black"), "marker": "o", "markersize": 3}


def plot_regret_vs_n(reports: Sequence[RegretReport], out_dir: str,
                     prefix: str = "regret_vs_n") -> List[str]:
    """One file per target: relative regret against n for the MSE loss rows."""
    paths = []
    targets = sorted({r.target for r in reports if r.loss == "mse"})
    for target in targets:
        rows = sorted((r for r in reports if r.loss == "mse" and r.target == target),
                      key=lambda r: r.n)
        if not rows:
            continue
        methods = [m for m in rows[0].relative_regret if m != "ORACLE"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in methods:
            ax.plot([r.n for r in rows], [r.relative_regret[m] for r in rows],
                    label=m, **_method_style(m))
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel("relative regret")
        ax.set_title(f"MSE regret, target {target}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_{target.replace('.', '_')}.png")
        fig.savefig(path, **_SAVEFIG_KW)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_detection_regret(reports: Sequence[RegretReport], out_dir: str,
                          prefix: str = "detection_regret") -> List[str]:
    """One file per (target, n): detection regret against the threshold grid."""
    paths = []
    cells = sorted({(r.target, r.n) for r in reports if r.loss == "detect"})
    for target, n in cells:
        rows = sorted((r for r in reports
                       if r.loss == "detect" and r.target == target and r.n == n),
                      key=lambda r: r.threshold)
        if not rows:
            continue
        methods = [m for m in rows[0].relative_regret if m != "ORACLE"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in methods:
            ax.plot([r.threshold for r in rows], [r.relative_regret[m] for r in rows],
                    label=m, **_method_style(m))
        ax.set_xlabel("threshold c")
        ax.set_ylabel("relative regret")
        ax.set_title(f"Detection regret, target {target}, n={n}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_{target.replace('.', '_')}_n{n}.png")
        fig.savefig(path, **_SAVEFIG_KW)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_flag_counts(counts: Dict[str, Dict[float, int]], target: str, out_dir: str,
                     prefix: str = "flag_counts") -> str:
    """Flagged-unit counts against the threshold, one line per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted(counts):
        grid = sorted(counts[method])
        ax.plot(grid, [counts[method][c] for c in grid], label=method,
                **_method_style(method))
    ax.set_xlabel("threshold c")
    ax.set_ylabel("units flagged")
    ax.set_title(f"Units flagged below threshold, target {target}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, f"{prefix}_{target.replace('.', '_')}.png")
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path
