"""The assembled detector: noise views -> view branches -> prompt selection
-> prompt encoding -> CFP fusion -> prompt mixing -> mask decoding."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .branch import ViewBranch
from .cfp import CFPFusion
from .config import TrainConfig
from .foundation import ToyFoundation
from .losses import image_score
from .noise import BayarConv, NoiseprintSurrogate, SRMFilter
from .prompting import (PromptMixer, build_candidates, derive_boxes, derive_mask, inference_prompt,
                        select_optimal)
from .types import BRANCH_VIEWS, BoxPrompt, ViewId


@dataclass
class ForwardOutput:
    view_maps: list            # four (B, H, W) maps in BRANCH_VIEWS order
    p_sam: torch.Tensor        # (B, H, W)
    p_opt: torch.Tensor        # (B, H, W)
    scores: torch.Tensor       # (B,)
    chosen: list               # ViewId per sample
    boxes: list = field(default_factory=list)
    features: dict = field(default_factory=dict)


class IMDPrompter(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.srm = SRMFilter()
        self.bayar = BayarConv(cfg.bayar_kernels)
        self.noiseprint = NoiseprintSurrogate(3, cfg.noiseprint_width, cfg.noiseprint_layers)
        in_ch = {ViewId.RGB: 3, ViewId.SRM: 3, ViewId.BAYAR: cfg.bayar_kernels, ViewId.NOISEPRINT: 1}
        self.branches = nn.ModuleDict({
            v.value: ViewBranch(in_ch[v], cfg.feat_channels, cfg.branch_width) for v in BRANCH_VIEWS
        })
        self.foundation = ToyFoundation(cfg.foundation_spec())
        self.cfp = CFPFusion(cfg.encoder_channels, cfg.feat_channels, cfg.cfp_proj_channels)
        self.pmm = PromptMixer(cfg.encoder_channels, cfg.embed_dim)

    def view_inputs(self, x: torch.Tensor) -> dict:
        return {
            ViewId.RGB: x,
            ViewId.SRM: self.srm(x),
            ViewId.BAYAR: self.bayar(x),
            ViewId.NOISEPRINT: self.noiseprint(x),
        }

    def forward(self, x: torch.Tensor, gt: torch.Tensor | None = None,
                valid: torch.Tensor | None = None) -> ForwardOutput:
        """``gt`` (B, H, W) with 255 = ignore selects the training prompt path;
        ``gt=None`` is the inference path (ensemble prompt, no labels read)."""
        cfg = self.cfg
        size = x.shape[-2:]
        if valid is None:
            valid = torch.ones(x.shape[0], *size, dtype=torch.bool, device=x.device)
        inputs = self.view_inputs(x)
        feats, maps = {}, []
        for v in BRANCH_VIEWS:
            branch = self.branches[v.value]
            f = branch.segment(inputs[v])
            feats[v] = f
            maps.append(branch.classify(f, size)[:, 0])
        f_sam = self.foundation.image_encode(x)
        f_cfp = self.cfp(f_sam, *(feats[v] for v in BRANCH_VIEWS))

        p_sam, p_opt, scores, chosen, all_boxes = [], [], [], [], []
        focal = cfg.focal()
        forced = ViewId(cfg.forced_view.upper()) if cfg.forced_view else None
        for b in range(x.shape[0]):
            per_view = [m[b] for m in maps]
            if gt is None:
                p_o, view, mask, boxes = inference_prompt(per_view, cfg.mask_threshold, cfg.k_max)
                if not bool(valid[b].all()):
                    mask = mask & valid[b]
                    boxes = derive_boxes(mask, cfg.k_max)
            else:
                cands = build_candidates(per_view)
                if forced is not None:
                    p_o, view = cands[forced], forced
                else:
                    p_o, view, _ = select_optimal(cands, gt[b], focal, valid[b])
                mask = derive_mask(p_o, cfg.mask_threshold) & valid[b]
                boxes = derive_boxes(mask, cfg.k_max)
            f_opt = self.foundation.prompt_encode(mask, boxes)
            f_mix = self.pmm(f_cfp[b], f_opt)
            prob = self.foundation.mask_decode(f_cfp[b], f_mix, size)
            p_sam.append(prob)
            p_opt.append(p_o)
            scores.append(image_score(prob, valid[b]))
            chosen.append(view)
            all_boxes.append(boxes)
        return ForwardOutput(
            view_maps=maps,
            p_sam=torch.stack(p_sam),
            p_opt=torch.stack(p_opt),
            scores=torch.stack(scores),
            chosen=chosen,
            boxes=all_boxes,
            features={"f_sam": f_sam, "f_cfp": f_cfp, **{v.value: feats[v] for v in BRANCH_VIEWS}},
        )


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def encoder_checksum(model: IMDPrompter) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.foundation.encoder.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


__all__ = ["IMDPrompter", "ForwardOutput", "BoxPrompt", "encoder_checksum", "trainable_parameters"]
