"""Training objectives: focal segmentation loss, Otsu adaptive pooling for
the image-level score, image-level BCE and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionMismatch, NonFinite
from .types import LossBreakdown

IGNORE_VALUE = 255
EXACT_OTSU_MAX_PIXELS = 4096


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25
    clamp_eps: float = 1e-6


def _valid_mask(target: torch.Tensor, valid):
    keep = target != IGNORE_VALUE
    if valid is not None:
        keep = keep & valid.to(torch.bool)
    return keep


def focal_seg_loss(prob: torch.Tensor, target: torch.Tensor, params: FocalParams = FocalParams(),
                   valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over non-ignored pixels of -alpha_t (1 - p_t)^gamma log(p_t).

    ``target`` holds {0, 1}; pixels equal to 255 (or outside ``valid``) are
    excluded. Returns a 0-dim tensor; an all-ignored map gives 0.
    """
    if prob.shape != target.shape:
        raise DimensionMismatch(f"prediction {tuple(prob.shape)} vs target {tuple(target.shape)}")
    keep = _valid_mask(target, valid)
    eps = params.clamp_eps
    p = prob.clamp(eps, 1 - eps)
    pos = target == 1
    p_t = torch.where(pos, p, 1 - p)
    alpha_t = torch.where(pos, torch.full_like(p, params.alpha), torch.full_like(p, 1 - params.alpha))
    loss = -alpha_t * (1 - p_t) ** params.gamma * torch.log(p_t)
    loss = torch.where(keep, loss, torch.zeros_like(loss))
    n = keep.sum()
    return loss.sum() / n.clamp(min=1)


def _objective(lo: np.ndarray, hi: np.ndarray) -> float:
    # size-weighted within-class variance; var of an empty class is 0
    a = lo.size * float(np.var(lo)) if lo.size else 0.0
    b = hi.size * float(np.var(hi)) if hi.size else 0.0
    return a + b


def otsu_objective(values, omega: float) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    return _objective(v[v < omega], v[v >= omega])


def otsu_threshold(prob, exact: bool | None = None, bins: int = 256) -> float:
    """Threshold drawn from the pixel values minimising
    |{p < w}| var({p < w}) + |{p >= w}| var({p >= w}); ties go to the smallest w.

    Maps up to 4096 pixels use the exact scan over all distinct values; larger
    maps (or ``exact=False``) scan ``bins`` histogram edges and snap the
    winner to the smallest pixel value at or above the edge.
    """
    if isinstance(prob, torch.Tensor):
        prob = prob.detach().cpu().numpy()
    v = np.sort(np.asarray(prob, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty probability map")
    if exact is None:
        exact = v.size <= EXACT_OTSU_MAX_PIXELS
    if exact:
        cands, first = np.unique(v, return_index=True)
    else:
        edges = np.linspace(v[0], v[-1], bins + 1)[:-1]
        first = np.unique(np.searchsorted(v, edges, side="left"))
        cands = v[first]
    # prefix-sum screening of all candidates (centred for stability)
    c = v - v.mean()
    s1 = np.concatenate([[0.0], np.cumsum(c)])
    s2 = np.concatenate([[0.0], np.cumsum(c * c)])
    n = v.size
    k = first
    lo_n = k
    hi_n = n - k
    with np.errstate(invalid="ignore", divide="ignore"):
        lo = np.where(lo_n > 0, s2[k] - s1[k] ** 2 / np.maximum(lo_n, 1), 0.0)
        hi = np.where(hi_n > 0, (s2[n] - s2[k]) - (s1[n] - s1[k]) ** 2 / np.maximum(hi_n, 1), 0.0)
    approx = lo + hi
    best = approx.min()
    tol = 1e-9 * max(abs(best), float(s2[n]), 1e-300)
    near = np.flatnonzero(approx <= best + tol)
    # refine the near-optimal set with the direct two-pass objective
    winner, win_obj = None, math.inf
    for i in near:
        obj = _objective(v[: k[i]], v[k[i]:])
        if obj < win_obj:
            winner, win_obj = i, obj
    return float(cands[winner])


def adaptive_pool(prob: torch.Tensor, omega: float, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of the responses >= omega (differentiable in ``prob``)."""
    sel = prob >= omega
    if valid is not None:
        sel = sel & valid.to(torch.bool)
    n = sel.sum()
    return torch.where(sel, prob, torch.zeros_like(prob)).sum() / n.clamp(min=1)


def image_score(prob: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Otsu threshold + adaptive pooling over the valid region of ``prob``."""
    vals = prob.detach()
    if valid is not None:
        vals = vals[valid.to(torch.bool)]
    omega = otsu_threshold(vals)
    return adaptive_pool(prob, omega, valid)


def image_level_loss(score, y, eps: float = 1e-6):
    """Binary cross-entropy of the image-level score against label ``y``."""
    if isinstance(score, torch.Tensor):
        s = score.clamp(eps, 1 - eps)
        y = torch.as_tensor(y, dtype=s.dtype, device=s.device)
        return -(y * torch.log(s) + (1 - y) * torch.log(1 - s))
    s = min(max(float(score), eps), 1 - eps)
    return -(y * math.log(s) + (1 - y) * math.log(1 - s))


def total_loss(seg_sam, seg_p, cpc, img_level, lambda1=1.0, lambda2=0.1, lambda3=1.0) -> LossBreakdown:
    parts = [float(seg_sam), float(seg_p), float(cpc), float(img_level)]
    if not all(math.isfinite(p) for p in parts + [lambda1, lambda2, lambda3]):
        raise NonFinite(f"non-finite loss component in {parts}")
    if any(p < 0 for p in parts):
        raise ValueError(f"loss components must be nonnegative, got {parts}")
    total = parts[0] + lambda1 * parts[1] + lambda2 * parts[2] + lambda3 * parts[3]
    return LossBreakdown(*parts, lambda1=lambda1, lambda2=lambda2, lambda3=lambda3, total=total)


def combine(seg_sam, seg_p, cpc, img_level, lambda1=1.0, lambda2=0.1, lambda3=1.0):
    """Tensor version of ``total_loss`` used for backprop."""
    return seg_sam + lambda1 * seg_p + lambda2 * cpc + lambda3 * img_level
