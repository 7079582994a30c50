"""Cross-view Feature Perception: fuses the frozen-encoder features with the
four view features into a single feature map for the mask decoder."""

from __future__ import annotations

import math
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ChannelMismatch, NonFinite


def keys_kernel(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


@lru_cache(maxsize=64)
def _bicubic_matrix(n_in: int, n_out: int, a: float) -> tuple:
    rows = []
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        i0 = math.floor(src)
        t = src - i0
        row = [0.0] * n_in
        for k in range(-1, 3):
            j = min(max(i0 + k, 0), n_in - 1)
            row[j] += keys_kernel(k - t, a)
        rows.append(tuple(row))
    return tuple(rows)


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5, dtype=torch.float64) -> torch.Tensor:
    """(n_out, n_in) Keys cubic-convolution resampling matrix with half-pixel
    centres and edge clamping."""
    return torch.tensor(_bicubic_matrix(n_in, n_out, a), dtype=dtype)


def bicubic_resize(x: torch.Tensor, size, a: float = -0.5) -> torch.Tensor:
    """Separable bicubic resampling of the last two dims of ``x``."""
    h, w = size
    if tuple(x.shape[-2:]) == (h, w):
        return x
    mh = bicubic_matrix(x.shape[-2], h, a, x.dtype).to(x.device)
    mw = bicubic_matrix(x.shape[-1], w, a, x.dtype).to(x.device)
    return torch.einsum("ih,...hw,jw->...ij", mh, x, mw)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x):
        return F.gelu(self.norm(self.conv(x)))


class CFPFusion(nn.Module):
    """Per-view 1x1 projections, concatenation with F_sam, two conv blocks and
    a channel-attention gate (GAP -> FC -> GELU -> sigmoid) on the shortcut.

    out = blocks(z) + gate(z) * shortcut(z),  z = [F_sam ; proj_v(resize(f_v))]
    """

    def __init__(self, sam_channels: int = 64, view_channels: int = 32, proj_channels: int = 16,
                 num_views: int = 4):
        super().__init__()
        self.sam_channels = sam_channels
        self.view_channels = view_channels
        self.view_proj = nn.ModuleList(
            nn.Conv2d(view_channels, proj_channels, 1) for _ in range(num_views)
        )
        cat = sam_channels + num_views * proj_channels
        self.blocks = nn.Sequential(ConvBlock(cat, sam_channels), ConvBlock(sam_channels, sam_channels))
        self.shortcut = nn.Conv2d(cat, sam_channels, 1)
        self.fc = nn.Linear(cat, sam_channels)

    def concat(self, f_sam, views):
        if f_sam.ndim != 4 or f_sam.shape[1] != self.sam_channels:
            raise ChannelMismatch(f"F_sam must have {self.sam_channels} channels, got {tuple(f_sam.shape)}")
        if len(views) != len(self.view_proj):
            raise ChannelMismatch(f"expected {len(self.view_proj)} view features, got {len(views)}")
        size = f_sam.shape[-2:]
        parts = [f_sam]
        for proj, f in zip(self.view_proj, views):
            if f.ndim != 4 or f.shape[1] != self.view_channels:
                raise ChannelMismatch(
                    f"view features must have {self.view_channels} channels, got {tuple(f.shape)}"
                )
            parts.append(proj(bicubic_resize(f, size)))
        return torch.cat(parts, dim=1)

    def attention_logits(self, z):
        return F.gelu(self.fc(z.mean(dim=(-2, -1))))

    def forward(self, f_sam, f_rgb, f_srm, f_bayar, f_noiseprint, attn_logits=None):
        inputs = (f_sam, f_rgb, f_srm, f_bayar, f_noiseprint)
        if not all(torch.isfinite(t).all() for t in inputs):
            raise NonFinite("CFP inputs contain non-finite values")
        z = self.concat(f_sam, inputs[1:])
        if attn_logits is None:
            attn_logits = self.attention_logits(z)
        gate = torch.sigmoid(attn_logits)[..., None, None]
        return self.blocks(z) + gate * self.shortcut(z)


def cfp_fuse(f_sam, f_rgb, f_srm, f_bayar, f_noiseprint, params: CFPFusion):
    return params(f_sam, f_rgb, f_srm, f_bayar, f_noiseprint)
