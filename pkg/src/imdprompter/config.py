"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .foundation import FoundationSpec
from .losses import FocalParams


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    warmup_epochs: int = 1
    warmup_start_factor: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    max_steps: int = 0  # 0 = epochs * steps_per_epoch
    # objective
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    clamp_eps: float = 1e-6
    # prompting
    mask_threshold: float = 0.5
    k_max: int = 4
    forced_view: str = ""  # ablation: bypass OPS and always use this view
    # data
    image_size: int = 64
    augment: bool = True
    crop_size: int = 0  # 0 = no random crop
    flip_prob: float = 0.5
    seed: int = 0
    device: str = "cpu"
    # architecture
    feat_channels: int = 32
    branch_width: int = 16
    bayar_kernels: int = 3
    noiseprint_width: int = 16
    noiseprint_layers: int = 5
    cfp_proj_channels: int = 16
    encoder_stride: int = 8
    encoder_channels: int = 64
    embed_dim: int = 64
    num_heads: int = 4
    decoder_upsample: int = 4
    dense_grid: int = 2

    def __post_init__(self):
        positive = ["lr", "batch_size", "epochs", "image_size", "k_max", "feat_channels",
                    "branch_width", "bayar_kernels", "noiseprint_width", "noiseprint_layers",
                    "cfp_proj_channels", "encoder_stride", "encoder_channels", "embed_dim",
                    "num_heads", "decoder_upsample", "dense_grid", "warmup_start_factor", "clamp_eps"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda1", "lambda2", "lambda3", "weight_decay", "grad_clip", "focal_gamma",
                     "warmup_epochs", "max_steps", "crop_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.focal_alpha <= 1:
            raise ConfigError("focal_alpha must lie in [0, 1]")
        if not 0 < self.mask_threshold < 1:
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if self.image_size % self.encoder_stride:
            raise ConfigError("image_size must be divisible by encoder_stride")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs exceeds epochs")
        if self.forced_view and self.forced_view.upper() not in ("RGB", "SRM", "BAYAR", "NOISEPRINT", "ENS"):
            raise ConfigError(f"unknown forced_view {self.forced_view!r}")
        try:
            self.foundation_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def focal(self) -> FocalParams:
        return FocalParams(self.focal_gamma, self.focal_alpha, self.clamp_eps)

    def foundation_spec(self) -> FoundationSpec:
        return FoundationSpec(
            encoder_stride=self.encoder_stride,
            encoder_channels=self.encoder_channels,
            embed_dim=self.embed_dim,
            decoder_upsample=self.decoder_upsample,
            num_heads=self.num_heads,
            dense_grid=self.dense_grid,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _coerce(raw: str, typ):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines ('#' starts a comment) over ``base``."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = (base or TrainConfig()).to_dict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
