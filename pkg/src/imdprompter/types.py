"""Shared domain types and validation helpers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DimensionMismatch, InvalidBox, NonFinite, ValueRange


class ViewId(str, enum.Enum):
    """Candidate prompt sources. The order of members is the OPS tie order."""

    RGB = "RGB"
    SRM = "SRM"
    BAYAR = "BAYAR"
    NOISEPRINT = "NOISEPRINT"
    ENS = "ENS"


# views that own a segmentation branch; ENS only exists as a selection
BRANCH_VIEWS = (ViewId.RGB, ViewId.SRM, ViewId.BAYAR, ViewId.NOISEPRINT)
CANDIDATE_ORDER = BRANCH_VIEWS + (ViewId.ENS,)


@dataclass(frozen=True, eq=False)
class ImageSample:
    """An RGB image (H x W x 3, values in [0, 255]) with optional tamper mask."""

    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    label: int = 0
    kind: str = ""

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


def validate_sample(sample: ImageSample) -> ImageSample:
    """Return ``sample`` unchanged if it satisfies the ImageSample invariants."""
    img = np.asarray(sample.image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch(f"{sample.id}: image must be HxWx3, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise NonFinite(f"{sample.id}: image contains non-finite values")
    if img.size and (img.min() < 0 or img.max() > 255):
        raise ValueRange(f"{sample.id}: pixel values outside [0, 255]")
    if sample.mask is not None:
        mask = np.asarray(sample.mask)
        if mask.shape != img.shape[:2]:
            raise DimensionMismatch(
                f"{sample.id}: mask {mask.shape} does not match image {img.shape[:2]}"
            )
        if not np.all(np.isfinite(mask)):
            raise NonFinite(f"{sample.id}: mask contains non-finite values")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueRange(f"{sample.id}: mask must be binary")
    if sample.label not in (0, 1):
        raise ValueRange(f"{sample.id}: label must be 0 or 1")
    return sample


def check_probability_map(values, name: str = "probability map"):
    """Raise unless every entry is finite and inside [0, 1]; returns the input."""
    if isinstance(values, torch.Tensor):
        v = values.detach()
        if not torch.isfinite(v).all():
            raise NonFinite(f"{name} contains non-finite values")
        if v.numel() and (v.min() < 0 or v.max() > 1):
            raise ValueRange(f"{name} outside [0, 1]")
        return values
    arr = np.asarray(values)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueRange(f"{name} outside [0, 1]")
    return values


@dataclass(frozen=True)
class BoxPrompt:
    """Inclusive pixel box; x indexes columns, y indexes rows."""

    x1: int
    y1: int
    x2: int
    y2: int

    def validate(self, height: int, width: int) -> "BoxPrompt":
        if not (0 <= self.x1 <= self.x2 < width and 0 <= self.y1 <= self.y2 < height):
            raise InvalidBox(f"{self} outside a {height}x{width} image")
        return self

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class LossBreakdown:
    seg_sam: float
    seg_p: float
    cpc: float
    img_level: float
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    total: float = field(default=float("nan"))

    def as_row(self, step: int) -> dict:
        return {
            "step": step,
            "seg_sam": self.seg_sam,
            "seg_p": self.seg_p,
            "cpc": self.cpc,
            "img_level": self.img_level,
            "total": self.total,
        }
