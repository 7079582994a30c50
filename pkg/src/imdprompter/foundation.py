"""Promptable foundation segmenter seam.

``ToyFoundation`` mimics the SAM interface at desk scale: a frozen image
encoder, a prompt encoder turning a dense mask and box prompts into tokens,
and a two-way cross-attention mask decoder. A wrapper around real SAM
weights only has to provide the three methods of ``PromptableSegmenter``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionMismatch, PaddingRequired
from .types import BoxPrompt


@dataclass(frozen=True)
class FoundationSpec:
    encoder_stride: int = 8
    encoder_channels: int = 64
    embed_dim: int = 64
    decoder_upsample: int = 4
    num_heads: int = 4
    dense_grid: int = 2
    mlp_ratio: int = 2

    def __post_init__(self):
        for name in ("encoder_stride", "decoder_upsample"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.encoder_stride > 8:
            raise ValueError("encoder_stride must be <= 8 (three encoder blocks)")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even (sin/cos positional encoding)")

    def to_dict(self) -> dict:
        return asdict(self)


class PromptableSegmenter(Protocol):
    spec: FoundationSpec

    def image_encode(self, image: torch.Tensor) -> torch.Tensor: ...

    def prompt_encode(self, mask: torch.Tensor, boxes: Sequence[BoxPrompt]) -> torch.Tensor: ...

    def mask_decode(self, f_cfp: torch.Tensor, f_mix: torch.Tensor, size) -> torch.Tensor: ...


class ImageEncoder(nn.Module):
    """Three conv blocks; the first log2(stride) of them downsample by 2."""

    def __init__(self, spec: FoundationSpec):
        super().__init__()
        c = spec.encoder_channels
        n_down = int(math.log2(spec.encoder_stride))
        widths = [max(c // 4, 1), max(c // 2, 1), c]
        layers, in_ch = [], 3
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(in_ch, w, 3, stride=2 if i < n_down else 1, padding=1), nn.GELU()]
            in_ch = w
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PositionalEncoding(nn.Module):
    """Random Fourier features of normalised (x, y) coordinates, as in SAM.

    pe(x, y) = [sin(2 pi u @ G), cos(2 pi u @ G)], u = 2 * ((x, y) + 0.5) / (W, H) - 1
    """

    def __init__(self, embed_dim: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gaussian", scale * torch.randn(2, embed_dim // 2))

    def forward(self, coords: torch.Tensor, height: int, width: int) -> torch.Tensor:
        u = coords.to(self.gaussian.dtype) + 0.5
        u = torch.stack([u[..., 0] / width, u[..., 1] / height], dim=-1)
        u = 2 * math.pi * ((2 * u - 1) @ self.gaussian)
        return torch.cat([torch.sin(u), torch.cos(u)], dim=-1)


class PromptEncoder(nn.Module):
    def __init__(self, spec: FoundationSpec):
        super().__init__()
        d = spec.embed_dim
        self.spec = spec
        self.pe = PositionalEncoding(d)
        self.corner_embed = nn.Parameter(0.02 * torch.randn(2, d))
        self.no_mask_embed = nn.Parameter(0.02 * torch.randn(d))
        self.dense_pos = nn.Parameter(0.02 * torch.randn(spec.dense_grid**2, d))
        hid = max(d // 4, 1)
        self.mask_net = nn.Sequential(
            nn.Conv2d(1, hid, 1),
            nn.GELU(),
            nn.Conv2d(hid, d, 3, padding=1),
        )

    def box_tokens(self, boxes: Sequence[BoxPrompt], height: int, width: int) -> torch.Tensor:
        if not boxes:
            return self.corner_embed.new_zeros(0, self.spec.embed_dim)
        coords = torch.tensor(
            [[[b.x1, b.y1], [b.x2, b.y2]] for b in boxes], dtype=self.corner_embed.dtype,
            device=self.corner_embed.device,
        )
        return (self.pe(coords, height, width) + self.corner_embed).reshape(-1, self.spec.embed_dim)

    def dense_tokens(self, mask: torch.Tensor) -> torch.Tensor:
        s = self.spec.encoder_stride
        m = mask.to(self.corner_embed.dtype)[None, None]
        # area-max pooling keeps thin tampered regions alive on the coarse grid
        m = F.max_pool2d(m, kernel_size=s, stride=s) if s > 1 else m
        z = self.mask_net(m)
        z = F.adaptive_avg_pool2d(z, self.spec.dense_grid)
        return z.flatten(2)[0].transpose(0, 1) + self.dense_pos

    def forward(self, mask: torch.Tensor, boxes: Sequence[BoxPrompt]) -> torch.Tensor:
        h, w = mask.shape[-2:]
        if h % self.spec.encoder_stride or w % self.spec.encoder_stride:
            raise PaddingRequired(f"mask {h}x{w} not divisible by {self.spec.encoder_stride}")
        for b in boxes:
            b.validate(h, w)
        sparse = self.box_tokens(boxes, h, w)
        if not bool(mask.any()):
            dense = self.no_mask_embed.expand(self.spec.dense_grid**2, -1) + self.dense_pos
        else:
            dense = self.dense_tokens(mask)
        return torch.cat([sparse, dense], dim=0)


class TwoWayBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.cross_t2i = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))
        self.norm3 = nn.LayerNorm(d)
        self.cross_i2t = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(d)

    def forward(self, tokens, image):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, need_weights=False)[0])
        tokens = self.norm2(tokens + self.cross_t2i(tokens, image, image, need_weights=False)[0])
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(image, tokens, tokens, need_weights=False)[0])
        return tokens, image


class MaskDecoder(nn.Module):
    def __init__(self, spec: FoundationSpec):
        super().__init__()
        d = spec.embed_dim
        self.spec = spec
        self.image_proj = nn.Conv2d(spec.encoder_channels, d, 1)
        self.mask_token = nn.Parameter(0.02 * torch.randn(1, d))
        self.block = TwoWayBlock(d, spec.num_heads, spec.mlp_ratio)
        ups, ch = [], d
        for _ in range(int(math.log2(spec.decoder_upsample))):
            nxt = max(ch // 2, 1)
            # replicate padding keeps a constant input constant
            ups.append(nn.Conv2d(ch, nxt, 3, padding=1, padding_mode="replicate"))
            ch = nxt
        self.upscale = nn.ModuleList(ups)
        self.hyper = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, ch))

    def forward(self, f_cfp: torch.Tensor, f_mix: torch.Tensor, size) -> torch.Tensor:
        """f_cfp (C_e, h, w), f_mix (N, D) -> logits (H, W)."""
        if f_cfp.ndim != 3 or f_cfp.shape[0] != self.spec.encoder_channels:
            raise DimensionMismatch(
                f"decoder expects ({self.spec.encoder_channels}, h, w) features, got {tuple(f_cfp.shape)}"
            )
        if f_mix.ndim != 2 or f_mix.shape[1] != self.spec.embed_dim:
            raise DimensionMismatch(
                f"decoder expects (N, {self.spec.embed_dim}) prompt tokens, got {tuple(f_mix.shape)}"
            )
        _, h, w = f_cfp.shape
        img = self.image_proj(f_cfp[None])
        img_tokens = img.flatten(2).transpose(1, 2)
        tokens = torch.cat([self.mask_token, f_mix], dim=0)[None]
        tokens, img_tokens = self.block(tokens, img_tokens)
        feat = img_tokens.transpose(1, 2).reshape(1, -1, h, w)
        for conv in self.upscale:
            feat = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
            feat = F.gelu(conv(feat))
        weights = self.hyper(tokens[0, 0])
        logits = torch.einsum("c,bchw->bhw", weights, feat)[:, None]
        logits = F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)
        return logits[0, 0]


class ToyFoundation(nn.Module):
    def __init__(self, spec: FoundationSpec | None = None):
        super().__init__()
        self.spec = spec or FoundationSpec()
        self.encoder = ImageEncoder(self.spec)
        self.prompt_encoder = PromptEncoder(self.spec)
        self.decoder = MaskDecoder(self.spec)
        self.encoder.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        self.encoder.eval()
        return self

    def image_encode(self, image: torch.Tensor) -> torch.Tensor:
        s = self.spec.encoder_stride
        if image.shape[-1] % s or image.shape[-2] % s:
            raise PaddingRequired(f"image {tuple(image.shape[-2:])} not divisible by stride {s}")
        with torch.no_grad():
            return self.encoder(image)

    def prompt_encode(self, mask: torch.Tensor, boxes: Sequence[BoxPrompt]) -> torch.Tensor:
        return self.prompt_encoder(mask, boxes)

    def mask_decode_logits(self, f_cfp, f_mix, size) -> torch.Tensor:
        return self.decoder(f_cfp, f_mix, size)

    def mask_decode(self, f_cfp, f_mix, size) -> torch.Tensor:
        return torch.sigmoid(self.decoder(f_cfp, f_mix, size))


def image_encode(model: ToyFoundation, image):
    return model.image_encode(image)


def prompt_encode(model: ToyFoundation, mask, boxes):
    return model.prompt_encode(mask, boxes)


def mask_decode(model: ToyFoundation, f_cfp, f_mix, size):
    return model.mask_decode(f_cfp, f_mix, size)
