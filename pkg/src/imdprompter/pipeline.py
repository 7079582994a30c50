"""Training loop, inference, evaluation, robustness sweep and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from . import dataio
from .config import TrainConfig
from .errors import CheckpointMismatch, ConfigError, CorruptFile, EmptyDataset, NonFiniteLoss, VersionMismatch
from .losses import combine, focal_seg_loss, image_level_loss, total_loss
from .metrics import MetricsReport, build_report
from .model import IMDPrompter, trainable_parameters
from .prompting import OpsStatistics, cpc_loss
from .types import ImageSample, LossBreakdown, ViewId

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_KEY = "imdprompter"
LOSS_COLUMNS = ["step", "seg_sam", "seg_p", "cpc", "img_level", "total"]


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_model(cfg: TrainConfig) -> IMDPrompter:
    seed_everything(cfg.seed)
    return IMDPrompter(cfg).to(cfg.device)


# ------------------------------------------------------------------ batching

def make_batch(samples: Sequence[ImageSample], cfg: TrainConfig, device=None) -> dict:
    device = device or cfg.device
    pre = [dataio.preprocess(s.image, cfg.image_size, s.mask) for s in samples]
    x = torch.from_numpy(np.stack([p.image for p in pre])).to(device)
    gt = torch.from_numpy(np.stack([p.mask for p in pre]).astype(np.int64)).to(device)
    valid = torch.from_numpy(np.stack([p.valid for p in pre])).to(device)
    label = torch.tensor([int(s.label) for s in samples], dtype=torch.float32, device=device)
    return {"x": x, "gt": gt, "valid": valid, "label": label}


# -------------------------------------------------------------- lr schedule

def lr_factor(it: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up (iteration based) from ``warmup_start_factor`` over the
    warm-up epochs, then per-epoch cosine annealing to 0 at ``epochs``."""
    warm = cfg.warmup_epochs * steps_per_epoch
    if it < warm:
        s = cfg.warmup_start_factor
        return s + (1 - s) * it / warm
    epoch = it // steps_per_epoch
    span = cfg.epochs - cfg.warmup_epochs
    if span <= 0:
        return 1.0
    t = min(max(epoch - cfg.warmup_epochs, 0), span) / span
    return 0.5 * (1 + math.cos(math.pi * t))


# ------------------------------------------------------------------ training

@dataclass
class TrainState:
    model: IMDPrompter
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    cfg: TrainConfig
    step: int = 0
    ops: OpsStatistics = field(default_factory=OpsStatistics)
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig, steps_per_epoch: int = 1, model: IMDPrompter | None = None) -> TrainState:
    model = model or build_model(cfg)
    opt = torch.optim.AdamW(trainable_parameters(model), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda it: lr_factor(it, steps_per_epoch, cfg))
    return TrainState(model, opt, sched, cfg)


def compute_losses(out, batch: dict, cfg: TrainConfig) -> dict:
    """Batch-mean tensors for the four loss components."""
    focal = cfg.focal()
    gt, valid, label = batch["gt"], batch["valid"], batch["label"]
    B = gt.shape[0]
    seg_sam, seg_p, cpc, img = [], [], [], []
    for b in range(B):
        views = [m[b] for m in out.view_maps]
        seg_sam.append(focal_seg_loss(out.p_sam[b], gt[b], focal, valid[b]))
        seg_p.append(sum(focal_seg_loss(m, gt[b], focal, valid[b]) for m in views))
        cpc.append(cpc_loss(views, out.p_opt[b], focal, valid[b]))
        img.append(image_level_loss(out.scores[b], label[b], cfg.clamp_eps))
    mean = lambda xs: torch.stack(xs).mean()  # noqa: E731
    return {"seg_sam": mean(seg_sam), "seg_p": mean(seg_p), "cpc": mean(cpc), "img_level": mean(img)}


def train_step(batch: dict, state: TrainState) -> tuple[TrainState, LossBreakdown]:
    cfg, model = state.cfg, state.model
    model.train()
    out = model(batch["x"], batch["gt"], batch["valid"])
    parts = compute_losses(out, batch, cfg)
    loss = combine(parts["seg_sam"], parts["seg_p"], parts["cpc"], parts["img_level"],
                   cfg.lambda1, cfg.lambda2, cfg.lambda3)
    if not torch.isfinite(loss):
        dump = {k: float(v) for k, v in parts.items()}
        dump["step"] = state.step
        raise NonFiniteLoss(f"non-finite loss at step {state.step}: {dump}", dump)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(trainable_parameters(model), cfg.grad_clip)
    state.optimizer.step()
    state.scheduler.step()
    model.bayar.project_()
    for v in out.chosen:
        state.ops.record(v)
    state.step += 1
    breakdown = total_loss(*(float(parts[k].detach()) for k in ("seg_sam", "seg_p", "cpc", "img_level")),
                           cfg.lambda1, cfg.lambda2, cfg.lambda3)
    state.history.append(breakdown)
    return state, breakdown


def iterate_batches(samples, cfg: TrainConfig, rng: np.random.Generator):
    """Endless stream of augmented batches, reshuffled every epoch."""
    n = len(samples)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - cfg.batch_size + 1 if n >= cfg.batch_size else 1, cfg.batch_size):
            chosen = [samples[j] for j in order[i:i + cfg.batch_size]]
            if cfg.augment:
                chosen = [dataio.augment(s, rng, cfg.crop_size or None, cfg.flip_prob) for s in chosen]
            yield chosen


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, n_samples // batch_size)


def train(samples: Sequence[ImageSample], cfg: TrainConfig, steps: int | None = None,
          log_path=None, callback: Callable | None = None) -> TrainState:
    if not samples:
        raise EmptyDataset("no training samples")
    spe = steps_per_epoch(len(samples), cfg.batch_size)
    state = init_state(cfg, spe)
    total = steps or cfg.max_steps or cfg.epochs * spe
    rng = np.random.default_rng(cfg.seed)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        writer.writeheader()
    try:
        batches = iterate_batches(list(samples), cfg, rng)
        while state.step < total:
            batch = make_batch(next(batches), cfg)
            state, bd = train_step(batch, state)
            if writer is not None:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in bd.as_row(state.step).items()})
            if state.step % 50 == 0 or state.step == 1:
                log.info("step %d total %.5f", state.step, bd.total)
            if callback is not None:
                callback(state, bd)
    finally:
        if fh is not None:
            fh.close()
    return state


# ----------------------------------------------------------------- inference

class Predictor:
    """Inference wrapper: RGB image in, (probability map, score) out.

    Only the pixel array is ever passed in, so no mask or label can be read.
    """

    def __init__(self, model: IMDPrompter):
        self.model = model
        self.cfg = model.cfg

    @torch.no_grad()
    def infer(self, image) -> tuple[np.ndarray, float, ViewId]:
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[:2]
        pre = dataio.preprocess(image, self.cfg.image_size)
        x = torch.from_numpy(pre.image[None]).to(self.cfg.device)
        valid = torch.from_numpy(pre.valid[None]).to(self.cfg.device)
        self.model.eval()
        out = self.model(x, None, valid)
        prob = out.p_sam[0, :pre.height, :pre.width]
        if (pre.height, pre.width) != (h, w):
            prob = F.interpolate(prob[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
        return prob.cpu().numpy().astype(np.float64), float(out.scores[0]), out.chosen[0]

    def __call__(self, image):
        prob, score, _ = self.infer(image)
        return prob, score


def infer(model: IMDPrompter, image):
    return Predictor(model).infer(image)


def predict_all(predictor: Callable, images: Sequence) -> list:
    return [predictor(img) for img in images]


def evaluate(predictor: Callable, samples: Sequence[ImageSample], dataset: str = "data",
             degradation: dataio.DegradationSpec | None = None) -> MetricsReport:
    """Run ``predictor`` on every image, then score against masks and labels."""
    if not samples:
        raise EmptyDataset("cannot evaluate an empty dataset")
    images = [s.image if degradation is None else dataio.degrade(s.image, degradation) for s in samples]
    preds = predict_all(predictor, images)
    return build_report(
        dataset,
        [p for p, _ in preds],
        [s for _, s in preds],
        [s.mask if s.mask is not None else np.zeros(s.image.shape[:2], np.uint8) for s in samples],
        [s.label for s in samples],
    )


def robustness_sweep(predictor: Callable, samples: Sequence[ImageSample], dataset: str = "data"):
    """One evaluation per degradation level; rows in declared grid order."""
    rows = []
    for spec in dataio.robustness_grid():
        rows.append((spec, evaluate(predictor, samples, f"{dataset}/{spec.name}", spec)))
    return rows


# ---------------------------------------------------------------- checkpoint

def _header(model: IMDPrompter, tensors: dict, ops: OpsStatistics | None) -> dict:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].numpy().tobytes())
    return {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "foundation_spec": model.cfg.foundation_spec().to_dict(),
        "ops_counts": {v.value: n for v, n in ops.counts.items()} if ops else {},
        "sha256": h.hexdigest(),
    }


def checkpoint_bytes(model: IMDPrompter, ops: OpsStatistics | None = None) -> bytes:
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    meta = {CHECKPOINT_KEY: json.dumps(_header(model, tensors, ops), sort_keys=True)}
    return st_save(tensors, metadata=meta)


def save_checkpoint(model: IMDPrompter, path, ops: OpsStatistics | None = None):
    Path(path).write_bytes(checkpoint_bytes(model, ops))
    return path


def _read_header(data: bytes) -> dict:
    if len(data) < 8:
        raise CorruptFile("checkpoint too short")
    (n,) = struct.unpack("<Q", data[:8])
    if n > len(data) - 8:
        raise CorruptFile("checkpoint header length out of range")
    try:
        meta = json.loads(data[8:8 + n])["__metadata__"]
        return json.loads(meta[CHECKPOINT_KEY])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFile(f"unreadable checkpoint header: {exc}") from exc


def load_checkpoint(path, device: str | None = None):
    """Return (model, ops statistics). Raises VersionMismatch / CorruptFile /
    CheckpointMismatch."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read checkpoint {path}: {exc}") from exc
    header = _read_header(data)
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    try:
        tensors = st_load(data)
    except (SafetensorError, ValueError, RuntimeError) as exc:
        raise CorruptFile(f"corrupt checkpoint payload: {exc}") from exc
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].numpy().tobytes())
    if h.hexdigest() != header.get("sha256"):
        raise CorruptFile("checkpoint checksum mismatch")
    try:
        cfg = TrainConfig.from_dict(header["config"])
        if device:
            cfg = cfg.replace(device=device)
    except (ConfigError, KeyError, TypeError) as exc:
        raise CheckpointMismatch(f"checkpoint config is not usable: {exc}") from exc
    model = IMDPrompter(cfg)
    expected = model.state_dict()
    if set(expected) != set(tensors) or any(expected[k].shape != tensors[k].shape for k in expected):
        raise CheckpointMismatch("checkpoint tensors do not match the configured architecture")
    model.load_state_dict(tensors)
    model.to(cfg.device)
    return model, OpsStatistics(header.get("ops_counts") or None)


def write_loss_log(history: Sequence[LossBreakdown], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for i, bd in enumerate(history, 1):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in bd.as_row(i).items()})
