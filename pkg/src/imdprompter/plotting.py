"""Static figures for sweep results, training curves and OPS statistics."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SWEEP_SERIES = (("P-F1-fixed", "P-F1"), ("I-F1", "I-F1"), ("Com-F1", "Com-F1"))
AXIS_LABEL = {"jpeg": "JPEG quality", "blur": "Gaussian kernel size"}


def _float(v):
    return None if v in ("", None) else float(v)


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence[dict], kind: str, path):
    """Line plot of P-F1 / I-F1 / Com-F1 against one degradation grid.

    ``rows`` are sweep CSV rows carrying ``kind`` and ``level`` columns.
    Absent metrics (empty cells) are skipped rather than drawn as zero.
    """
    sel = [r for r in rows if r["kind"] == kind]
    levels = [int(r["level"]) for r in sel]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for col, label in SWEEP_SERIES:
        pts = [(x, _float(r[col])) for x, r in zip(levels, sel) if _float(r[col]) is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel(AXIS_LABEL.get(kind, kind))
    ax.set_ylabel("score")
    ax.set_ylim(-0.02, 1.02)
    if kind == "jpeg":
        ax.invert_xaxis()  # stronger compression to the right
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    ax.set_title(f"robustness: {kind}")
    fig.tight_layout()
    return _finish(fig, path)


def plot_loss_curve(rows: Sequence[dict], path):
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for col in ("total", "seg_sam", "seg_p", "cpc", "img_level"):
        ax.plot(steps, [float(r[col]) for r in rows], label=col, lw=1.5 if col == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _finish(fig, path)


def plot_ops_proportions(rows: Sequence[dict], path):
    names = [r["view_id"] for r in rows]
    props = [float(r["proportion"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, props, color="tab:blue")
    ax.set_ylabel("fraction of training samples")
    ax.set_ylim(0, 1)
    ax.set_title("optimal prompt selection")
    fig.tight_layout()
    return _finish(fig, path)
