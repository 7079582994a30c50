"""Semantic-agnostic noise views: SRM residuals, Bayar constrained
convolution and a trainable Noiseprint surrogate."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateKernel, DimensionMismatch, UnprojectedKernel

# ITU-R BT.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
BAYAR_TOL = 1e-5


def parse_kernel_file(text: str, size: int = 5) -> np.ndarray:
    """Parse blank-line separated blocks of ``size`` rows of reals."""
    kernels, rows = [], []
    for line in text.splitlines() + [""]:
        line = line.strip()
        if line.startswith("#"):
            continue
        if not line:
            if rows:
                block = np.array(rows, dtype=np.float64)
                if block.shape != (size, size):
                    raise ValueError(f"kernel block has shape {block.shape}, expected {size}x{size}")
                kernels.append(block)
                rows = []
            continue
        rows.append([float(v) for v in line.split()])
    return np.stack(kernels)


@lru_cache(maxsize=1)
def load_srm_kernels() -> np.ndarray:
    """The shipped SRM kernels as a (3, 5, 5) float64 array."""
    text = resources.files("imdprompter.data").joinpath("srm_kernels.txt").read_text()
    return parse_kernel_file(text)


def _srm_weight(in_channels: int, dtype=torch.float64) -> torch.Tensor:
    k = torch.as_tensor(load_srm_kernels(), dtype=dtype)
    # every kernel sees the sum over input channels
    return k[:, None].expand(-1, in_channels, -1, -1).contiguous()


def srm_residuals(x: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) -> (B, 3, H, W) SRM residuals, replicate same-padding."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionMismatch(f"expected (B, 3, H, W), got {tuple(x.shape)}")
    w = _srm_weight(3, x.dtype).to(x.device)
    pad = w.shape[-1] // 2
    return F.conv2d(F.pad(x, (pad,) * 4, mode="replicate"), w)


def srm_extract(image) -> np.ndarray:
    """H x W x 3 image -> 3 x H x W SRM noise map (computed in float64)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch(f"expected H x W x 3 image, got {img.shape}")
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    return srm_residuals(x)[0].numpy()


class SRMFilter(nn.Module):
    """Fixed (non-trainable) SRM front end."""

    def __init__(self):
        super().__init__()
        self.register_buffer("weight", _srm_weight(3, torch.float32), persistent=False)

    def forward(self, x):
        pad = self.weight.shape[-1] // 2
        return F.conv2d(F.pad(x, (pad,) * 4, mode="replicate"), self.weight.to(x.dtype))


def to_gray(x: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) -> (B, 1, H, W) using BT.601 weights."""
    w = torch.tensor(GRAY_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def bayar_project(kernels: torch.Tensor) -> torch.Tensor:
    """Return a copy of ``kernels`` (K, 1, k, k) with the Bayar constraint
    enforced: centre weight -1 and the remaining weights rescaled to sum to 1."""
    if kernels.ndim != 4 or kernels.shape[-1] != kernels.shape[-2] or kernels.shape[-1] % 2 == 0:
        raise DimensionMismatch(f"expected (K, C, k, k) with odd k, got {tuple(kernels.shape)}")
    dtype = kernels.dtype
    w = kernels.detach().to(torch.float64).clone()
    K, C, k, _ = w.shape
    c = k // 2
    flat = w.reshape(K * C, k * k)
    centre = c * k + c
    others = torch.ones(k * k, dtype=torch.bool)
    others[centre] = False
    sums = flat[:, others].sum(dim=1)
    bad = ~torch.isfinite(flat).all(dim=1) | (sums == 0) | ~torch.isfinite(sums)
    if bad.any():
        idx = torch.nonzero(bad).flatten().tolist()
        raise DegenerateKernel(f"kernels {idx} have a zero or non-finite off-centre sum")
    flat[:, others] = flat[:, others] / sums[:, None]
    flat[:, centre] = -1.0
    out = flat.to(dtype)
    # push the float rounding residual into the largest off-centre weight
    for _ in range(2):
        resid = 1.0 - out[:, others].to(torch.float64).sum(dim=1)
        vals = out[:, others]
        j = vals.abs().argmax(dim=1)
        rows = torch.arange(out.shape[0])
        vals[rows, j] = (vals[rows, j].to(torch.float64) + resid).to(dtype)
        out[:, others] = vals
    return out.reshape(K, C, k, k).to(kernels.device)


def bayar_violation(kernels: torch.Tensor) -> tuple[float, float]:
    """Max |centre + 1| and max |sum(others) - 1| over all kernels."""
    w = kernels.detach().to(torch.float64)
    k = w.shape[-1]
    c = k // 2
    centre = w[..., c, c]
    others = w.sum(dim=(-1, -2)) - centre
    return float((centre + 1).abs().max()), float((others - 1).abs().max())


def bayar_extract(image: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Same-padded convolution of the grayscale image with projected kernels.

    ``image`` is (B, 3, H, W) or (B, 1, H, W); returns (B, K, H, W).
    """
    dc, ds = bayar_violation(kernels)
    if dc > BAYAR_TOL or ds > BAYAR_TOL:
        raise UnprojectedKernel(f"kernel constraint violated (centre {dc:.2e}, sum {ds:.2e})")
    gray = to_gray(image) if image.shape[1] == 3 else image
    pad = kernels.shape[-1] // 2
    return F.conv2d(F.pad(gray, (pad,) * 4, mode="replicate"), kernels.to(gray.dtype))


class BayarConv(nn.Module):
    """Learned constrained high-pass filters, re-projected before every use."""

    def __init__(self, out_channels: int = 3, kernel_size: int = 5):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, 1, kernel_size, kernel_size))
        self.reset_parameters()

    def reset_parameters(self, index=None):
        with torch.no_grad():
            w = torch.rand_like(self.weight) if index is None else torch.rand_like(self.weight[index])
            if index is None:
                self.weight.copy_(bayar_project(w))
            else:
                self.weight[index] = bayar_project(w[None])[0]

    @torch.no_grad()
    def project_(self):
        flat = self.weight.detach().double().flatten(1)
        k = self.weight.shape[-1]
        centre = (k // 2) * k + k // 2
        sums = flat.sum(dim=1) - flat[:, centre]
        for i in torch.nonzero(~torch.isfinite(sums) | (sums == 0)).flatten().tolist():
            self.reset_parameters(i)
        self.weight.copy_(bayar_project(self.weight))

    def forward(self, x):
        self.project_()
        return bayar_extract(x, self.weight)


class NoiseprintSurrogate(nn.Module):
    """Small residual CNN standing in for the pretrained Noiseprint network.

    ``num_layers`` counts every conv: one stem, ``num_layers - 2`` residual
    convs and a linear single-channel head.
    """

    def __init__(self, in_channels: int = 3, width: int = 16, num_layers: int = 5):
        super().__init__()
        if num_layers < 2:
            raise ValueError("num_layers must be at least 2")
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1)
        self.body = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1) for _ in range(num_layers - 2)
        )
        self.head = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x):
        h = F.gelu(self.stem(x))
        for conv in self.body:
            h = h + F.gelu(conv(h))
        return self.head(h)


def noiseprint_extract(image: torch.Tensor, params: NoiseprintSurrogate) -> torch.Tensor:
    """(B, 3, H, W) -> (B, 1, H, W) surrogate noiseprint residual."""
    if image.ndim != 4:
        raise DimensionMismatch(f"expected (B, C, H, W), got {tuple(image.shape)}")
    return params(image)
