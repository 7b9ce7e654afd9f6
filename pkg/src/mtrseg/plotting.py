"""Figures for run and ablation reports, rendered to files with the Agg backend."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}
COLORS = {"base": "#1f77b4", "inc": "#d62728", "all": "#2ca02c", "avg": "#7f7f7f"}


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def miou_per_step(reports: Sequence[MetricReport], path: str, title: str = "") -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        steps = [r.step for r in reports]
        for key in ("base", "inc", "all"):
            ys = [getattr(r, key) for r in reports]
            pts = [(s, y) for s, y in zip(steps, ys) if y is not None]
            if pts:
                ax.plot(*zip(*pts), marker="o", label=key, color=COLORS[key])
        ax.set_xlabel("step")
        ax.set_ylabel("mIoU (%)")
        ax.set_ylim(0, 100)
        ax.set_xticks(steps)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def per_class_heatmap(reports: Sequence[MetricReport], classes: Sequence[int], path: str) -> str:
    grid = np.full((len(reports), len(classes)), np.nan)
    for i, r in enumerate(reports):
        for j, c in enumerate(classes):
            if c in r.per_class_iou:
                grid[i, j] = 100 * r.per_class_iou[c]
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(0.5 * len(classes) + 1.5, 0.4 * len(reports) + 1.2))
        im = ax.imshow(grid, vmin=0, vmax=100, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(classes)), [str(c) for c in classes])
        ax.set_yticks(range(len(reports)), [str(r.step) for r in reports])
        ax.set_xlabel("class")
        ax.set_ylabel("step")
        fig.colorbar(im, ax=ax, label="IoU (%)")
        return _save(fig, path)


def loss_curves(records: Sequence[dict], terms: Sequence[str], path: str) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3))
        x = np.arange(len(records))
        for term in terms:
            ys = np.array([r.get(term, 0.0) for r in records], dtype=float)
            if np.any(ys > 0):
                ax.plot(x, ys, label=term, lw=1)
        bounds = [i for i in range(1, len(records)) if records[i]["step"] != records[i - 1]["step"]]
        for b in bounds:
            ax.axvline(b - 0.5, color="k", lw=0.5, ls=":")
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.set_xlabel("log record")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, fontsize=7, ncol=2)
        return _save(fig, path)


def ablation_bars(rows: Sequence[dict], path: str) -> str:
    keys = [k for k in ("base", "inc", "all") if any(r.get(k) is not None for r in rows)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * max(len(rows), 1) + 2, 3))
        width = 0.8 / max(len(keys), 1)
        for i, key in enumerate(keys):
            ys = [r.get(key) if r.get(key) is not None else 0.0 for r in rows]
            ax.bar(np.arange(len(rows)) + i * width, ys, width, label=key, color=COLORS[key])
        ax.set_xticks(np.arange(len(rows)) + width * (len(keys) - 1) / 2, [r["name"] for r in rows])
        ax.set_ylabel("final mIoU (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False)
        return _save(fig, path)


def render_run(run_dir: str, reports: Sequence[MetricReport], classes: Sequence[int], records: Sequence[dict],
               terms: Sequence[str], title: str = "") -> list[str]:
    out = [
        miou_per_step(reports, os.path.join(run_dir, "miou_per_step.png"), title),
        per_class_heatmap(reports, classes, os.path.join(run_dir, "per_class_iou.png")),
    ]
    if records:
        out.append(loss_curves(records, terms, os.path.join(run_dir, "losses.png")))
    return out
