"""Figures written next to the tabular report."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNGs byte-stable across runs
_META = {"Software": None}


def set_size(fraction=1.0, subplots=(1, 1)):
    """Figure size in inches for a 468pt text width, golden-ratio height."""
    width_in = 468 * fraction / 72.27
    golden = (5**0.5 - 1) / 2
    return width_in, width_in * golden * (subplots[0] / subplots[1])


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def similarity_distributions(
    sims: Mapping[tuple[str, str], np.ndarray],
    thresholds: Mapping[str, float],
    out_dir: Path,
) -> list[Path]:
    """One box plot per model: mated similarities per pattern, threshold as a line."""
    paths = []
    models = list(dict.fromkeys(m for _, m in sims))
    patterns = list(dict.fromkeys(p for p, _ in sims))
    for model in models:
        fig, ax = plt.subplots(figsize=set_size(0.8))
        data = [sims[(p, model)] for p in patterns]
        ax.boxplot(data, showfliers=False)
        ax.set_xticks(range(1, len(patterns) + 1), patterns, rotation=30, ha="right")
        if thresholds.get(model) is not None:
            ax.axhline(thresholds[model], color="tab:red", ls="--", lw=1, label="threshold")
            ax.legend(loc="lower left", frameon=False)
        ax.set_ylabel("mated cosine similarity")
        ax.set_title(model)
        paths.append(_save(fig, out_dir / f"similarities_{model}.png"))
    return paths


def random_baseline(rows: Mapping, out_path: Path) -> Path:
    names = list(rows)
    fig, ax = plt.subplots(figsize=set_size(0.8))
    ax.boxplot([rows[n].accuracies for n in names], showfliers=True)
    ax.scatter(range(1, len(names) + 1), [rows[n].baseline for n in names], marker="x", color="k", label="clean")
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel("recognition rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    return _save(fig, out_path)


def transfer_heatmap(matrix, out_dir: Path) -> list[Path]:
    paths = []
    for family, mode in matrix.conditions():
        grid = np.array(
            [
                [np.nan if (v := matrix.get(o, e, family, mode)) is None else v for e in matrix.evaluation_models]
                for o in matrix.optimization_models
            ]
        )
        fig, ax = plt.subplots(figsize=set_size(0.6))
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(matrix.evaluation_models)), matrix.evaluation_models)
        ax.set_yticks(range(len(matrix.optimization_models)), matrix.optimization_models)
        ax.set_xlabel("evaluation model")
        ax.set_ylabel("optimization model")
        for (r, c), v in np.ndenumerate(grid):
            if not np.isnan(v):
                ax.text(c, r, f"{v:.3f}", ha="center", va="center", color="w" if v < 0.6 else "k", fontsize=8)
        ax.set_title(f"{family}, {mode}")
        fig.colorbar(im, ax=ax)
        paths.append(_save(fig, out_dir / f"transfer_{family}_{mode}.png"))
    return paths


def optimization_trace(traces: Sequence, out_path: Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=set_size(0.8, (2, 1)))
    for k, tr in enumerate(traces):
        idx = [r.index for r in tr.iterations]
        ax1.plot(idx, [r.loss for r in tr.iterations], lw=1, label=f"restart {k}")
        full = [(r.index, r.full_accuracy) for r in tr.iterations if r.full_accuracy is not None]
        ax2.plot(idx, [r.accuracy for r in tr.iterations], lw=0.6, alpha=0.5)
        if full:
            ax2.plot(*zip(*full), "o-", ms=3, color=ax2.lines[-1].get_color())
    ax1.set_ylabel("mean anchor cosine")
    ax2.set_ylabel("recognition rate")
    ax2.set_xlabel("iteration")
    if len(traces) <= 10:
        ax1.legend(frameon=False, fontsize=7)
    return _save(fig, out_path)
