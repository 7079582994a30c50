"""Per-view segmenter + classifier head.

Each view (RGB, SRM, Bayar, Noiseprint) owns one ``ViewBranch``. All four
share the architecture hyperparameters but never share parameters.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ChannelMismatch


def group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, ch), ch)


class DepthwiseSeparable(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.dw = nn.Conv2d(in_ch, in_ch, 3, stride=stride, padding=1, groups=in_ch)
        self.norm1 = group_norm(in_ch)
        self.pw = nn.Conv2d(in_ch, out_ch, 1)
        self.norm2 = group_norm(out_ch)

    def forward(self, x):
        return F.gelu(self.norm2(self.pw(F.gelu(self.norm1(self.dw(x))))))


class ViewBranch(nn.Module):
    """Lightweight MobileNet-style FCN: a 4-stage depthwise-separable encoder
    (overall stride 4), a 2-layer decoder producing ``f_view`` and a 1x1
    classifier producing a full-resolution probability map."""

    def __init__(self, in_channels: int, feat_channels: int = 32, width: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.feat_channels = feat_channels
        self.width = width
        self.stride = 4
        w2 = 2 * width
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            group_norm(width),
            nn.GELU(),
            DepthwiseSeparable(width, w2, stride=2),
            DepthwiseSeparable(w2, w2),
            DepthwiseSeparable(w2, w2),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(w2, feat_channels, 3, padding=1),
            group_norm(feat_channels),
            nn.GELU(),
            nn.Conv2d(feat_channels, feat_channels, 3, padding=1),
            nn.GELU(),
        )
        self.classifier = nn.Conv2d(feat_channels, 1, 1)

    def architecture(self) -> dict:
        """Hyperparameters excluding the input channel count."""
        return {
            "type": type(self).__name__,
            "feat_channels": self.feat_channels,
            "width": self.width,
            "stride": self.stride,
            "stages": [type(m).__name__ for m in self.encoder],
            "decoder": [type(m).__name__ for m in self.decoder],
        }

    def segment(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ChannelMismatch(
                f"branch expects {self.in_channels} input channels, got {tuple(x.shape)}"
            )
        return self.decoder(self.encoder(x))

    def logits(self, f_view: torch.Tensor, size) -> torch.Tensor:
        if f_view.ndim != 4 or f_view.shape[1] != self.feat_channels:
            raise ChannelMismatch(
                f"classifier expects {self.feat_channels} feature channels, got {tuple(f_view.shape)}"
            )
        z = self.classifier(f_view)
        return F.interpolate(z, size=tuple(size), mode="bilinear", align_corners=False)

    def classify(self, f_view: torch.Tensor, size) -> torch.Tensor:
        # upsample logits first so the probability map lives at input resolution
        return torch.sigmoid(self.logits(f_view, size))

    def forward(self, x):
        f = self.segment(x)
        return f, self.classify(f, x.shape[-2:])


def segment_view(view_input: torch.Tensor, params: ViewBranch) -> torch.Tensor:
    return params.segment(view_input)


def classify_view(f_view: torch.Tensor, params: ViewBranch, size) -> torch.Tensor:
    return params.classify(f_view, size)
