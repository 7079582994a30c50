"""Evaluation battery: pixel-level F1 (fixed and best threshold), image-level
sensitivity / specificity / F1 / AUC and composite F1."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionMismatch, EmptyInput
from .losses import IGNORE_VALUE


def _as_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def _flatten_valid(prob, gt, valid=None):
    p = _as_numpy(prob).astype(np.float64)
    g = _as_numpy(gt)
    if p.shape != g.shape:
        raise DimensionMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    keep = g != IGNORE_VALUE
    if valid is not None:
        keep &= _as_numpy(valid).astype(bool)
    return p[keep], g[keep].astype(bool)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def pixel_f1(prob, gt, threshold: float = 0.5, valid=None) -> float:
    """F1 of ``prob >= threshold`` against ``gt`` (255 = ignored)."""
    p, g = _flatten_valid(prob, gt, valid)
    pred = p >= threshold
    tp = int(np.sum(pred & g))
    fp = int(np.sum(pred & ~g))
    fn = int(np.sum(~pred & g))
    return f1_from_counts(tp, fp, fn)


def best_threshold_f1(prob, gt, valid=None) -> tuple[float, float]:
    """Max F1 over thresholds in distinct(prob) plus 0.5; ties -> smaller threshold."""
    p, g = _flatten_valid(prob, gt, valid)
    order = np.argsort(p, kind="stable")
    ps, gs = p[order], g[order]
    n, n_pos = ps.size, int(gs.sum())
    cands = np.unique(np.concatenate([ps, [0.5]]))
    first = np.searchsorted(ps, cands, side="left")
    tp_suffix = np.concatenate([np.cumsum(gs[::-1])[::-1], [0]])
    tp = tp_suffix[first]
    predicted = n - first
    denom = predicted + n_pos
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    i = int(np.argmax(f1))  # first maximum == smallest threshold
    return float(f1[i]), float(cands[i])


def harmonic_mean(a, b):
    if a is None or b is None:
        return None
    return 2 * a * b / (a + b) if a + b else 0.0


def auc_score(scores, labels):
    """Mann-Whitney AUC with mid-rank tie correction; None if a class is absent."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def image_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> dict:
    """Sensitivity, specificity, their harmonic mean (I-F1) and AUC.

    A rate whose class is absent is reported as None.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.size == 0:
        raise EmptyInput("no image-level scores")
    if s.shape != y.shape:
        raise DimensionMismatch(f"{s.size} scores vs {y.size} labels")
    pred = s >= threshold
    pos, neg = y == 1, y == 0
    sen = float(np.mean(pred[pos])) if pos.any() else None
    spe = float(np.mean(~pred[neg])) if neg.any() else None
    return {"sensitivity": sen, "specificity": spe, "I_F1": harmonic_mean(sen, spe),
            "AUC": auc_score(s, y)}


def composite_f1(i_f1, p_f1):
    """Harmonic mean of image-level and pixel-level F1 (unit preserving)."""
    return harmonic_mean(i_f1, p_f1)


COLUMNS = ["dataset", "I-AUC", "Sen", "Spe", "I-F1", "P-F1-fixed", "P-F1-best", "Com-F1"]


@dataclass(frozen=True)
class MetricsReport:
    dataset: str
    i_auc: float | None
    sen: float | None
    spe: float | None
    i_f1: float | None
    p_f1_fixed: float | None
    p_f1_best: float | None
    com_f1: float | None

    def row(self) -> dict:
        vals = [getattr(self, f.name) for f in fields(self)]
        return dict(zip(COLUMNS, vals))

    def csv_row(self) -> dict:
        return {k: ("" if v is None else (v if isinstance(v, str) else repr(float(v))))
                for k, v in self.row().items()}

    @classmethod
    def from_row(cls, row: dict) -> "MetricsReport":
        vals = [row[COLUMNS[0]]] + [None if row[c] in ("", None) else float(row[c]) for c in COLUMNS[1:]]
        return cls(*vals)


def write_reports_csv(reports, fh, extra: Sequence[dict] | None = None):
    extra = extra or [{} for _ in reports]
    keys = list(extra[0].keys()) if extra and extra[0] else []
    w = csv.DictWriter(fh, fieldnames=keys + COLUMNS, lineterminator="\n")
    w.writeheader()
    for r, e in zip(reports, extra):
        w.writerow({**e, **r.csv_row()})


def reports_to_csv(reports, extra=None) -> str:
    buf = io.StringIO()
    write_reports_csv(reports, buf, extra)
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricsReport]:
    return [MetricsReport.from_row(r) for r in csv.DictReader(io.StringIO(text))]


def format_table(reports: Sequence[MetricsReport]) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, str):
            return v
        return f"{v:.4f}"

    rows = [COLUMNS] + [[cell(v) for v in r.row().values()] for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def build_report(dataset: str, prob_maps, scores, masks, labels, valid_masks=None,
                 threshold: float = 0.5) -> MetricsReport:
    """Aggregate per-image predictions into a MetricsReport.

    P-F1 is computed per manipulated image and averaged; authentic images only
    enter the image-level metrics.
    """
    if not len(scores):
        raise EmptyInput("no predictions to evaluate")
    valid_masks = valid_masks if valid_masks is not None else [None] * len(scores)
    fixed, best = [], []
    for p, g, y, v in zip(prob_maps, masks, labels, valid_masks):
        if int(y) == 1:
            fixed.append(pixel_f1(p, g, threshold, v))
            best.append(best_threshold_f1(p, g, v)[0])
    im = image_metrics(scores, labels, threshold)
    p_fixed = float(np.mean(fixed)) if fixed else None
    p_best = float(np.mean(best)) if best else None
    return MetricsReport(
        dataset=dataset,
        i_auc=im["AUC"],
        sen=im["sensitivity"],
        spe=im["specificity"],
        i_f1=im["I_F1"],
        p_f1_fixed=p_fixed,
        p_f1_best=p_best,
        com_f1=composite_f1(im["I_F1"], p_fixed),
    )


def as_dict(report: MetricsReport) -> dict:
    return asdict(report)


def isclose_report(a: MetricsReport, b: MetricsReport, tol: float = 0.0) -> bool:
    for f in fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, float) and isinstance(y, float):
            if not math.isclose(x, y, rel_tol=0, abs_tol=tol):
                return False
        elif x != y:
            return False
    return True
