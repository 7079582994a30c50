"""Prompt learning core: ensemble, optimal prompt selection (OPS), mask and
box prompt derivation, cross-view prompt consistency (CPC) and the prompt
mixing module (PMM)."""

from __future__ import annotations

import csv
from collections import Counter
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .errors import DimensionMismatch, MissingGroundTruth
from .losses import FocalParams, focal_seg_loss
from .types import BRANCH_VIEWS, CANDIDATE_ORDER, BoxPrompt, ViewId

CPC_BINARIZE_AT = 0.5


def ensemble(p_rgb, p_srm, p_bayar, p_noiseprint) -> torch.Tensor:
    """Pixelwise mean of the four view maps.

    Values are sorted along the view axis before summing so the result is
    bit-identical under any permutation of the arguments.
    """
    maps = (p_rgb, p_srm, p_bayar, p_noiseprint)
    if len({tuple(m.shape) for m in maps}) != 1:
        raise DimensionMismatch(f"view maps differ in shape: {[tuple(m.shape) for m in maps]}")
    return torch.stack(maps).sort(dim=0).values.sum(dim=0) / 4


def build_candidates(view_maps: Sequence[torch.Tensor]) -> dict:
    """Four view maps (RGB, SRM, Bayar, Noiseprint order) -> the five candidates."""
    cands = dict(zip(BRANCH_VIEWS, view_maps))
    cands[ViewId.ENS] = ensemble(*view_maps)
    return cands


def candidate_losses(candidates: Mapping[ViewId, torch.Tensor], gt, params: FocalParams = FocalParams(),
                     valid=None) -> dict:
    with torch.no_grad():
        return {v: float(focal_seg_loss(candidates[v].detach(), gt, params, valid)) for v in CANDIDATE_ORDER}


def select_optimal(candidates: Mapping[ViewId, torch.Tensor], gt, params: FocalParams = FocalParams(),
                   valid=None):
    """Return (P_opt, chosen ViewId, per-candidate losses).

    The candidate with the smallest focal loss against ``gt`` wins; ties
    resolve in the order RGB, SRM, BAYAR, NOISEPRINT, ENS.
    """
    if gt is None:
        raise MissingGroundTruth("optimal prompt selection needs a ground-truth mask")
    if set(candidates) != set(CANDIDATE_ORDER):
        raise ValueError(f"candidate set must contain exactly {[v.value for v in CANDIDATE_ORDER]}")
    losses = candidate_losses(candidates, gt, params, valid)
    chosen = CANDIDATE_ORDER[0]
    for v in CANDIDATE_ORDER[1:]:
        if losses[v] < losses[chosen]:
            chosen = v
    return candidates[chosen], chosen, losses


def derive_mask(p_opt: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return p_opt.detach() >= threshold


def derive_boxes(mask, k_max: int = 4) -> list[BoxPrompt]:
    """Tight boxes around 8-connected components, largest first."""
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    m = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel())[1:]
    slices = ndimage.find_objects(labels)
    order = sorted(range(n), key=lambda i: -sizes[i])[:k_max]
    boxes = []
    for i in order:
        rs, cs = slices[i]
        boxes.append(BoxPrompt(cs.start, rs.start, cs.stop - 1, rs.stop - 1))
    return boxes


def cpc_loss(view_maps: Sequence[torch.Tensor], p_opt: torch.Tensor, params: FocalParams = FocalParams(),
             valid=None) -> torch.Tensor:
    """Sum of focal losses of each view map against the detached, binarised P_opt."""
    if len(view_maps) != 4:
        raise ValueError("cpc_loss takes the four view maps")
    for m in view_maps:
        if m.shape != p_opt.shape:
            raise DimensionMismatch(f"view map {tuple(m.shape)} vs P_opt {tuple(p_opt.shape)}")
    target = (p_opt.detach() >= CPC_BINARIZE_AT).to(p_opt.dtype)
    return sum(focal_seg_loss(m, target, params, valid) for m in view_maps)


class PromptMixer(nn.Module):
    """Flattens F_CFP into one token per cell (projected to D), appends the
    prompt tokens and maps every token through a shared two-layer MLP."""

    def __init__(self, feat_channels: int = 64, embed_dim: int = 64, hidden: int | None = None):
        super().__init__()
        self.feat_channels = feat_channels
        self.embed_dim = embed_dim
        hidden = hidden or 2 * embed_dim
        self.feat_proj = nn.Linear(feat_channels, embed_dim)
        self.mlp = nn.Sequential(nn.Linear(embed_dim, hidden), nn.GELU(), nn.Linear(hidden, embed_dim))

    def forward(self, f_cfp: torch.Tensor, f_opt: torch.Tensor) -> torch.Tensor:
        if f_cfp.ndim != 3 or f_cfp.shape[0] != self.feat_channels:
            raise DimensionMismatch(f"F_CFP must be ({self.feat_channels}, h, w), got {tuple(f_cfp.shape)}")
        if f_opt.ndim != 2 or f_opt.shape[1] != self.embed_dim:
            raise DimensionMismatch(f"F_opt must be (N, {self.embed_dim}), got {tuple(f_opt.shape)}")
        feat_tokens = self.feat_proj(f_cfp.flatten(1).transpose(0, 1))
        return self.mlp(torch.cat([feat_tokens, f_opt], dim=0))


def mix_prompts(f_cfp, f_opt, params: PromptMixer) -> torch.Tensor:
    return params(f_cfp, f_opt)


def inference_prompt(view_maps: Sequence[torch.Tensor], threshold: float = 0.5, k_max: int = 4):
    """Ground-truth free prompt: always the ensemble map.

    Returns (P_opt, ViewId.ENS, M_opt, boxes).
    """
    p_ens = ensemble(*view_maps)
    mask = derive_mask(p_ens, threshold)
    return p_ens, ViewId.ENS, mask, derive_boxes(mask, k_max)


class OpsStatistics:
    """Counts how often each candidate is selected as the optimal prompt."""

    def __init__(self, counts: Mapping[ViewId, int] | None = None):
        self.counts = Counter({v: 0 for v in CANDIDATE_ORDER})
        if counts:
            self.counts.update({ViewId(k): int(n) for k, n in counts.items()})

    def record(self, view: ViewId):
        self.counts[ViewId(view)] += 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def proportions(self) -> dict:
        n = self.total
        return {v: (self.counts[v] / n if n else 0.0) for v in CANDIDATE_ORDER}

    def rows(self) -> list[dict]:
        props = self.proportions()
        return [{"view_id": v.value, "count": self.counts[v], "proportion": props[v]} for v in CANDIDATE_ORDER]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["view_id", "count", "proportion"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())

    @classmethod
    def from_csv(cls, path) -> "OpsStatistics":
        with open(Path(path), newline="") as fh:
            return cls({row["view_id"]: int(row["count"]) for row in csv.DictReader(fh)})
