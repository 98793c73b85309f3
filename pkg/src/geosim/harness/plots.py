"""Report figures, rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..analysis import SpectrumReport  # noqa: E402
from ..evaluation import RankingReport  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def loss_curve(curve: Sequence[dict], path) -> Path:
    steps = [r["step"] for r in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["total"] for r in curve], label="total", color="k")
    for key in ("id_global", "id_local", "tri_local", "view"):
        ax.plot(steps, [r[key] for r in curve], label=key, alpha=0.7, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, path)


def sweep_curve(rows: Sequence[dict], axis: str, path) -> Path:
    xs = [r[axis] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, [100 * r["rank1"] for r in rows], "o-", label="Rank-1")
    ax.plot(xs, [100 * r["mAP"] for r in rows], "s--", label="mAP")
    if all(isinstance(x, (int, float)) and x > 0 for x in xs) and max(xs) / min(xs) >= 8:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(axis)
    ax.set_ylabel("%")
    ax.legend()
    return _save(fig, path)


def bar_table(rows: Sequence[dict], label_key: str, path, title: str = "") -> Path:
    labels = [str(r[label_key]) for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows) + 2), 3.5))
    ax.bar(x - 0.2, [100 * r["rank1"] for r in rows], 0.4, label="Rank-1")
    ax.bar(x + 0.2, [100 * r["mAP"] for r in rows], 0.4, label="mAP")
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel("%")
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def spectrum_energy(rep: SpectrumReport, path, ks: Sequence[int] = ()) -> Path:
    k = np.arange(1, len(rep.cumulative_energy) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(k, rep.cumulative_energy, "o-", ms=3)
    for kk in ks:
        ax.axvline(kk, color="grey", ls=":", lw=0.8)
        ax.annotate(f"{rep.energy_at(kk):.2f}", (kk, rep.energy_at(kk)), fontsize=8,
                    xytext=(3, -10), textcoords="offset points")
    ax.set_xlabel("k")
    ax.set_ylabel("cumulative energy")
    ax.set_ylim(0, 1.02)
    return _save(fig, path)


def bin_delta_map(rep: RankingReport, n_alt: int, n_angle: int, path) -> Path:
    grid = np.full((n_alt, n_angle), np.nan)
    for (a, g), v in rep.delta_map.items():
        grid[a, g] = 100 * v
    lim = max(1e-9, float(np.nanmax(np.abs(grid)))) if np.isfinite(grid).any() else 1.0
    fig, ax = plt.subplots(figsize=(4.5, 3.8))
    im = ax.imshow(grid, cmap="RdBu", vmin=-lim, vmax=lim, origin="lower")
    for (a, g), v in rep.delta_map.items():
        mark = "*" if (a, g) in rep.low_support else ""
        ax.text(g, a, f"{100 * v:+.1f}{mark}", ha="center", va="center", fontsize=8)
    ax.set_xlabel("angle bin")
    ax.set_ylabel("altitude bin")
    fig.colorbar(im, ax=ax, label="mAP delta (points)")
    return _save(fig, path)
