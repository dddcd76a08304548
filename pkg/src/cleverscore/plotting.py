"""Matplotlib figures written next to the tabular reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evt import reverse_weibull_pdf  # noqa: E402

SERIES_STYLE = {
    "clever": dict(marker="o", linestyle="none", color="tab:blue"),
    "ifgsm": dict(marker="^", linestyle="none", color="tab:red"),
    "l2_attack": dict(marker="v", linestyle="none", color="tab:orange"),
    "slope": dict(marker="x", linestyle="none", color="tab:green"),
    "oracle": dict(marker="s", linestyle="none", color="tab:purple", fillstyle="none"),
}


def _finish(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison(triples: Sequence[tuple[int, str, float]], out_dir: str | Path) -> list[Path]:
    """One panel per (p, target kind): per-instance scores against attack distortions."""
    panels: dict[str, dict[str, list]] = {}
    for x, series, y in triples:
        name, tag = series.split("[", 1)
        panels.setdefault(tag.rstrip("]"), {}).setdefault(name, []).append((x, y))
    paths = []
    for tag, series in sorted(panels.items()):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for name, points in series.items():
            xs, ys = zip(*points)
            ax.plot(xs, ys, label=name, markersize=4, **SERIES_STYLE.get(name, {}))
        ax.set_xlabel("instance id")
        ax.set_ylabel("distortion / score")
        ax.set_title(tag)
        ax.legend(fontsize=8)
        safe = tag.replace("=", "").replace(",", "_")
        paths.append(_finish(fig, Path(out_dir) / f"compare_{safe}.png"))
    return paths


def plot_fit_histograms(cells: Sequence[dict], path: str | Path) -> Path:
    """Histogram of batch maxima with the fitted reverse Weibull density."""
    n = max(1, len(cells))
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.2), squeeze=False)
    for ax, cell in zip(axes[0], cells):
        values, fit = np.asarray(cell["samples"]), cell["fit"]
        ax.hist(values, bins=30, density=True, color="0.75")
        if not fit.degenerate:
            lo = values.min() - 0.1 * (values.max() - values.min())
            grid = np.linspace(lo, fit.location, 300)
            ax.plot(grid, reverse_weibull_pdf(fit.params, grid), color="tab:red")
        a, b, c = fit.params.location, fit.params.scale, fit.params.shape
        ax.set_title(f"#{cell['instance_id']} {cell['target_kind']} p={cell['p']}\n"
                     f"a={a:.3g} b={b:.3g} c={c:.3g} ks={fit.ks_statistic:.3f} pval={fit.ks_pvalue:.2f}",
                     fontsize=8)
        ax.set_xlabel("batch max of gradient norm")
    return _finish(fig, Path(path))


def plot_sweep(table: Sequence[dict], nb_list: Sequence[int], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for nb in nb_list:
        ys = [row.get(f"score_nb{nb}", math.nan) for row in table]
        ax.plot(range(len(ys)), ys, marker="o", linestyle="none", markersize=3, label=f"N_b={nb}")
    ax.set_xlabel("cell")
    ax.set_ylabel("score")
    ax.legend(fontsize=8)
    return _finish(fig, Path(path))


def plot_scores(triples: Sequence[tuple[int, str, float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    series: dict[str, list] = {}
    for x, name, y in triples:
        series.setdefault(name, []).append((x, y))
    for name, points in sorted(series.items()):
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", linestyle="none", markersize=3, label=name)
    ax.set_xlabel("instance id")
    ax.set_ylabel("score")
    ax.legend(fontsize=7)
    return _finish(fig, Path(path))
