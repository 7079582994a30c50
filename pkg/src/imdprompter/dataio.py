"""Dataset ingestion, preprocessing, augmentation, synthetic tamper
generation and the JPEG / blur degradations of the robustness protocol.

On-disk layout::

    root/images/<id>.png   RGB image
    root/masks/<id>.png    binary mask, white (>127) = tampered
    root/labels.csv        columns id,label,kind
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, EmptyDataset, MissingMask, RegionTooLarge, UnreadableImage
from .losses import IGNORE_VALUE
from .types import ImageSample, validate_sample

MEAN = np.array([123.675, 116.28, 103.53])
STD = np.array([58.395, 57.12, 57.375])
PAD_VALUE = 0.0

JPEG_GRID = (100, 90, 80, 70, 60, 50)
BLUR_GRID = (0, 5, 11, 17, 23, 29)


# --------------------------------------------------------------------- loading

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImage(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return (np.asarray(im.convert("L")) > 127).astype(np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImage(f"cannot read mask {path}: {exc}") from exc


def _find(directory: Path, sid: str):
    p = directory / f"{sid}.png"
    if p.exists():
        return p
    hits = sorted(directory.glob(f"{sid}.*"))
    return hits[0] if hits else None


def load_dataset(root) -> list[ImageSample]:
    root = Path(root)
    table = root / "labels.csv"
    if not root.is_dir() or not table.exists():
        raise DataError(f"{root} is not a dataset root (labels.csv missing)")
    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    samples = []
    for row in sorted(rows, key=lambda r: r["id"]):
        sid, label = row["id"], int(row["label"])
        img_path = _find(root / "images", sid)
        if img_path is None:
            raise UnreadableImage(f"no image file for sample {sid}")
        image = read_image(img_path)
        mask_path = _find(root / "masks", sid) if (root / "masks").is_dir() else None
        if mask_path is None:
            if label == 1:
                raise MissingMask(f"manipulated sample {sid} has no mask")
            mask = np.zeros(image.shape[:2], dtype=np.uint8)
        else:
            mask = read_mask(mask_path)
        samples.append(validate_sample(ImageSample(sid, image, mask, label, row.get("kind", "") or "")))
    return samples


def write_dataset(samples, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "kind"])
        for s in samples:
            Image.fromarray(np.clip(np.rint(s.image), 0, 255).astype(np.uint8)).save(
                root / "images" / f"{s.id}.png")
            if s.mask is not None:
                Image.fromarray((np.asarray(s.mask) > 0).astype(np.uint8) * 255).save(
                    root / "masks" / f"{s.id}.png")
            w.writerow([s.id, s.label, s.kind])
    return root


# --------------------------------------------------------------- preprocessing

@dataclass(frozen=True)
class Preprocessed:
    image: np.ndarray            # 3 x S x S normalised float32
    mask: np.ndarray | None      # S x S uint8, 255 on padding
    valid: np.ndarray            # S x S bool, False on padding
    height: int                  # content size after any downscale
    width: int


def fit_size(image, size: int, mask=None):
    """Downscale (never upscale) so the longer side is at most ``size``."""
    h, w = image.shape[:2]
    scale = min(1.0, size / max(h, w))
    if scale == 1.0:
        return image, mask
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    image = cv2.resize(np.asarray(image, dtype=np.float32), (nw, nh), interpolation=cv2.INTER_AREA)
    if mask is not None:
        mask = cv2.resize(np.asarray(mask, dtype=np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST)
    return image.astype(np.float64), mask


def normalize(image, channel_order: str = "RGB") -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if channel_order.upper() == "BGR":
        img = img[..., ::-1]
    return ((img - MEAN) / STD).transpose(2, 0, 1)


def unnormalize(x) -> np.ndarray:
    """Inverse of ``normalize`` for a 3 x H x W array; returns H x W x 3 RGB."""
    return np.asarray(x, dtype=np.float64).transpose(1, 2, 0) * STD + MEAN


def preprocess(image, size: int, mask=None, channel_order: str = "RGB") -> Preprocessed:
    """Normalise with the ImageNet statistics, then zero-pad image (and pad
    the mask with the ignore value 255) to ``size`` x ``size``."""
    image, mask = fit_size(image, size, mask)
    h, w = image.shape[:2]
    x = np.full((3, size, size), PAD_VALUE, dtype=np.float32)
    x[:, :h, :w] = normalize(image, channel_order)
    valid = np.zeros((size, size), dtype=bool)
    valid[:h, :w] = True
    m = None
    if mask is not None:
        m = np.full((size, size), IGNORE_VALUE, dtype=np.uint8)
        m[:h, :w] = np.asarray(mask, dtype=np.uint8)
    return Preprocessed(x, m, valid, h, w)


# ---------------------------------------------------------------- augmentation

def hflip(sample: ImageSample) -> ImageSample:
    mask = None if sample.mask is None else sample.mask[:, ::-1].copy()
    return replace(sample, image=sample.image[:, ::-1].copy(), mask=mask)


def crop(sample: ImageSample, top: int, left: int, height: int, width: int) -> ImageSample:
    image = sample.image[top:top + height, left:left + width].copy()
    if sample.mask is None:
        return replace(sample, image=image)
    mask = sample.mask[top:top + height, left:left + width].copy()
    # a crop that removes every tampered pixel yields an authentic sample
    return replace(sample, image=image, mask=mask, label=int(mask.any()))


def augment(sample: ImageSample, rng: np.random.Generator, crop_size: int | None = None,
            flip_prob: float = 0.5) -> ImageSample:
    """Random horizontal flip then random crop, applied jointly to image and mask."""
    if rng.random() < flip_prob:
        sample = hflip(sample)
    if crop_size is not None:
        h, w = sample.image.shape[:2]
        ch, cw = min(crop_size, h), min(crop_size, w)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        sample = crop(sample, top, left, ch, cw)
    return sample


# ------------------------------------------------------------ synthetic data

def make_authentic(rng: np.random.Generator, size: int = 64, sid: str = "auth") -> ImageSample:
    """Procedural 'camera' image: smooth colour field plus an image-specific
    noise level, so that pasted regions carry foreign noise statistics."""
    coarse = rng.uniform(30, 225, size=(4, 4, 3)).astype(np.float32)
    field = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC).astype(np.float64)
    texture = cv2.GaussianBlur(rng.normal(0, 1, (size, size, 3)), (0, 0), 1.5) * 25.0
    sigma = rng.uniform(1.0, 12.0)
    img = field + texture + rng.normal(0, sigma, (size, size, 3))
    img = np.clip(img, 0, 255)
    return ImageSample(sid, img, np.zeros((size, size), np.uint8), 0, "authentic")


def region_mask(height, width, top, left, rh, rw, shape: str = "rect") -> np.ndarray:
    m = np.zeros((height, width), dtype=np.uint8)
    if shape == "rect":
        m[top:top + rh, left:left + rw] = 1
        return m
    yy, xx = np.mgrid[0:rh, 0:rw]
    cy, cx = (rh - 1) / 2, (rw - 1) / 2
    inside = ((yy - cy) / (rh / 2)) ** 2 + ((xx - cx) / (rw / 2)) ** 2 <= 1.0
    m[top:top + rh, left:left + rw] = inside
    return m


def synthesize_splice(host: ImageSample, donor: ImageSample | None, rng: np.random.Generator,
                      region=None, shape: str | None = None, min_frac: float = 0.2,
                      max_frac: float = 0.5, sid: str | None = None) -> ImageSample:
    """Paste a rectangle or ellipse from ``donor`` into ``host``.

    ``donor=None`` means copy-move (the host is its own donor). ``region`` is
    an optional (top, left, height, width) placement; otherwise it is drawn
    at random with sides in [min_frac, max_frac] of the host size.
    """
    copy_move = donor is None
    donor = host if copy_move else donor
    h, w = host.image.shape[:2]
    dh, dw = donor.image.shape[:2]
    shape = shape or ("rect" if rng.random() < 0.5 else "ellipse")
    if region is None:
        rh = int(rng.integers(max(1, int(min_frac * h)), max(2, int(max_frac * h)) + 1))
        rw = int(rng.integers(max(1, int(min_frac * w)), max(2, int(max_frac * w)) + 1))
        top = int(rng.integers(0, h - rh + 1)) if rh <= h else 0
        left = int(rng.integers(0, w - rw + 1)) if rw <= w else 0
    else:
        top, left, rh, rw = (int(v) for v in region)
    if rh <= 0 or rw <= 0:
        raise RegionTooLarge("region must have positive area")
    if top < 0 or left < 0 or top + rh > h or left + rw > w or rh > dh or rw > dw:
        raise RegionTooLarge(f"region {(top, left, rh, rw)} does not fit host {h}x{w} / donor {dh}x{dw}")
    sy = int(rng.integers(0, dh - rh + 1))
    sx = int(rng.integers(0, dw - rw + 1))
    mask = region_mask(h, w, top, left, rh, rw, shape)
    if not mask.any():
        raise RegionTooLarge("region produced an empty mask")
    patch = np.zeros_like(host.image)
    patch[top:top + rh, left:left + rw] = donor.image[sy:sy + rh, sx:sx + rw]
    image = np.where(mask[..., None].astype(bool), patch, host.image)
    kind = "cpmv" if copy_move else "spli"
    return ImageSample(sid or f"{host.id}_{kind}", image, mask, 1, kind)


def make_synthetic_set(authentic: list[ImageSample], n: int, rng: np.random.Generator,
                       copy_move_prob: float = 0.0) -> list[ImageSample]:
    """``n`` spliced positives plus ``n`` authentic negatives."""
    if len(authentic) < 2:
        raise DataError("need at least two authentic images")
    out = []
    for i in range(n):
        hi, di = rng.choice(len(authentic), size=2, replace=False)
        donor = None if rng.random() < copy_move_prob else authentic[di]
        out.append(synthesize_splice(authentic[hi], donor, rng, sid=f"pos_{i:04d}"))
    for i in range(n):
        a = authentic[i % len(authentic)]
        out.append(ImageSample(f"neg_{i:04d}", a.image.copy(), np.zeros(a.image.shape[:2], np.uint8),
                               0, "authentic"))
    return out


def synthetic_fixture(n: int = 8, size: int = 64, seed: int = 0) -> list[ImageSample]:
    rng = np.random.default_rng(seed)
    pool = [make_authentic(rng, size, f"a{i}") for i in range(max(n, 2))]
    return make_synthetic_set(pool, n, rng)


# ---------------------------------------------------------------- degradation

@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    level: int

    def __post_init__(self):
        grid = {"jpeg": JPEG_GRID, "blur": BLUR_GRID}.get(self.kind)
        if grid is None:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.level not in grid:
            raise ValueError(f"{self.kind} level {self.level} not in {grid}")

    @property
    def is_identity(self) -> bool:
        return (self.kind == "jpeg" and self.level == 100) or (self.kind == "blur" and self.level == 0)

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.level}"


def robustness_grid() -> list[DegradationSpec]:
    return [DegradationSpec("jpeg", q) for q in JPEG_GRID] + [DegradationSpec("blur", k) for k in BLUR_GRID]


def blur_sigma(ksize: int) -> float:
    return 0.3 * ((ksize - 1) / 2 - 1) + 0.8


def jpeg_bytes(image, quality: int) -> bytes:
    buf = io.BytesIO()
    arr = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
    return buf.getvalue()


def degrade(image, spec: DegradationSpec) -> np.ndarray:
    """JPEG round trip or Gaussian blur; the identity levels (quality 100,
    kernel 0) return the input unchanged."""
    if spec.is_identity:
        return image
    if spec.kind == "jpeg":
        with Image.open(io.BytesIO(jpeg_bytes(image, spec.level))) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    k = spec.level
    out = cv2.GaussianBlur(np.asarray(image, dtype=np.float64), (k, k), blur_sigma(k),
                           borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out, 0, 255)
