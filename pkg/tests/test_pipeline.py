import copy
import json
import math
import struct

import numpy as np
import pytest
import torch

from conftest import tiny_config
from imdprompter import dataio, pipeline
from imdprompter.config import TrainConfig
from imdprompter.errors import CorruptFile, EmptyDataset, VersionMismatch
from imdprompter.metrics import build_report
from imdprompter.model import encoder_checksum
from imdprompter.noise import bayar_violation
from imdprompter.types import ImageSample, ViewId
from oracles import focal_np


class TripwireSample:
    """Looks like an ImageSample but raises if a mask or label is read."""

    def __init__(self, sample):
        self.id = sample.id
        self.image = sample.image

    @property
    def mask(self):
        raise AssertionError("mask accessed during inference")

    @property
    def label(self):
        raise AssertionError("label accessed during inference")


class OracleStub:
    """Predictor that returns the ground truth: every metric must be 1.0."""

    def __init__(self, samples):
        self.by_bytes = {s.image.tobytes(): s for s in samples}

    def __call__(self, image):
        s = self.by_bytes[np.asarray(image).tobytes()]
        return s.mask.astype(np.float64), float(s.label)


def test_encoder_frozen_while_trainable_parts_move(small_samples):
    cfg = tiny_config()
    model = pipeline.build_model(cfg)
    before = encoder_checksum(model)
    dec = copy.deepcopy(model.foundation.decoder.state_dict())
    pe = copy.deepcopy(model.foundation.prompt_encoder.state_dict())
    state = pipeline.init_state(cfg, 1, model)
    batch = pipeline.make_batch(small_samples[:2], cfg)
    for _ in range(3):
        state, _ = pipeline.train_step(batch, state)
    assert encoder_checksum(model) == before
    after_dec = model.foundation.decoder.state_dict()
    after_pe = model.foundation.prompt_encoder.state_dict()
    assert any(not torch.equal(dec[k], after_dec[k]) for k in dec)
    assert any(not torch.equal(pe[k], after_pe[k]) for k in pe)
    dc, ds = bayar_violation(model.bayar.weight)
    assert dc < 1e-6 and ds < 1e-6


def test_identical_steps_identical_losses(small_samples):
    cfg = tiny_config()
    batch = pipeline.make_batch(small_samples[:2], cfg)
    runs = []
    for _ in range(2):
        state = pipeline.init_state(cfg)
        _, bd = pipeline.train_step(batch, state)
        runs.append(bd)
    assert runs[0] == runs[1]


def test_plain_segmentation_ablation_matches_oracle(small_samples):
    cfg = tiny_config(lambda2=0.0, lambda3=0.0, forced_view="RGB")
    state = pipeline.init_state(cfg)
    batch = pipeline.make_batch(small_samples[:2], cfg)
    with torch.no_grad():
        out = state.model(batch["x"], batch["gt"], batch["valid"])
    assert all(v == ViewId.RGB for v in out.chosen)
    gt = batch["gt"].numpy()
    expected = 0.0
    for b in range(2):
        expected += focal_np(out.p_sam[b].numpy(), gt[b])
        expected += sum(focal_np(m[b].numpy(), gt[b]) for m in out.view_maps)
    expected /= 2
    _, bd = pipeline.train_step(batch, state)
    assert bd.total == pytest.approx(expected, rel=1e-5)
    assert bd.total == pytest.approx(bd.seg_sam + bd.seg_p, rel=1e-12)


def test_lr_schedule_values():
    cfg = TrainConfig(lr=1e-4, epochs=4, warmup_epochs=1, warmup_start_factor=1e-4)
    spe = 5
    assert pipeline.lr_factor(0, spe, cfg) == pytest.approx(1e-4)
    assert pipeline.lr_factor(2, spe, cfg) == pytest.approx(1e-4 + (1 - 1e-4) * 2 / 5)
    assert pipeline.lr_factor(5, spe, cfg) == pytest.approx(1.0)
    # two epochs into a three-epoch cosine: 0.5 (1 + cos(pi / 3))
    assert pipeline.lr_factor(10, spe, cfg) == pytest.approx(0.75)
    assert pipeline.lr_factor(20, spe, cfg) == pytest.approx(0.0, abs=1e-12)

    state = pipeline.init_state(tiny_config(lr=1e-4, epochs=4), spe)
    assert state.optimizer.param_groups[0]["lr"] == pytest.approx(1e-8)


def test_loss_decreases_over_first_steps(fixture_samples):
    # one fixed full batch so each step sees the same data
    sub = [fixture_samples[0], fixture_samples[1], fixture_samples[8], fixture_samples[9]]
    cfg = TrainConfig(lr=1e-4, lambda3=0.1, augment=False, batch_size=4, epochs=50)
    state = pipeline.train(sub, cfg, steps=50)
    totals = [bd.total for bd in state.history]
    assert len(totals) == 50
    assert all(b < a for a, b in zip(totals, totals[1:]))


def test_train_rejects_empty():
    with pytest.raises(EmptyDataset):
        pipeline.train([], tiny_config())


def test_inference_never_reads_labels(trained_tiny, small_samples):
    predictor = pipeline.Predictor(trained_tiny.model)
    wired = [TripwireSample(s) for s in small_samples]
    preds = [predictor.infer(s.image) for s in wired]
    again = [predictor.infer(s.image) for s in wired]
    for (p1, s1, v1), (p2, s2, v2) in zip(preds, again):
        assert np.array_equal(p1, p2) and s1 == s2
        assert v1 == v2 == ViewId.ENS
    assert preds[0][0].shape == small_samples[0].image.shape[:2]


def test_inference_always_ensemble(trained_tiny):
    predictor = pipeline.Predictor(trained_tiny.model)
    rng = np.random.default_rng(0)
    chosen = [predictor.infer(rng.uniform(0, 255, (32, 32, 3)))[2] for _ in range(100)]
    assert chosen.count(ViewId.ENS) == 100


def test_zero_probability_map_scores_zero(trained_tiny):
    model = copy.deepcopy(trained_tiny.model)
    orig = model.foundation.mask_decode

    def zero_decode(*args, **kw):
        return torch.zeros_like(orig(*args, **kw))

    model.foundation.mask_decode = zero_decode
    prob, score, _ = pipeline.infer(model, np.full((32, 32, 3), 100.0))
    assert score == 0.0 and not prob.any()


def test_oracle_predictor_scores_perfectly(fixture_samples):
    report = pipeline.evaluate(OracleStub(fixture_samples), fixture_samples, "oracle")
    for value in (report.i_auc, report.sen, report.spe, report.i_f1, report.p_f1_fixed,
                  report.p_f1_best, report.com_f1):
        assert value == 1.0


def test_authentic_only_dataset(fixture_samples):
    auth = [s for s in fixture_samples if s.label == 0]
    report = pipeline.evaluate(OracleStub(auth), auth, "auth")
    assert report.p_f1_fixed is None and report.sen is None and report.spe == 1.0


def test_evaluate_composes_metrics(trained_tiny, small_samples):
    predictor = pipeline.Predictor(trained_tiny.model)
    report = pipeline.evaluate(predictor, small_samples, "tiny")
    preds = [predictor(s.image) for s in small_samples]
    direct = build_report("tiny", [p for p, _ in preds], [s for _, s in preds],
                          [s.mask for s in small_samples], [s.label for s in small_samples])
    assert report == direct
    with pytest.raises(EmptyDataset):
        pipeline.evaluate(predictor, [], "none")


def test_checkpoint_round_trip(trained_tiny, small_samples, tmp_path):
    model = trained_tiny.model
    path = pipeline.save_checkpoint(model, tmp_path / "a.safetensors", trained_tiny.ops)
    loaded, ops = pipeline.load_checkpoint(path)
    assert loaded.cfg == model.cfg
    assert ops.counts == trained_tiny.ops.counts
    pipeline.save_checkpoint(loaded, tmp_path / "b.safetensors", ops)
    assert (tmp_path / "a.safetensors").read_bytes() == (tmp_path / "b.safetensors").read_bytes()
    before = pipeline.evaluate(pipeline.Predictor(model), small_samples)
    after = pipeline.evaluate(pipeline.Predictor(loaded), small_samples)
    assert before == after


def _rewrite_header(data: bytes, edit) -> bytes:
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n])
    inner = json.loads(header["__metadata__"]["imdprompter"])
    edit(inner)
    header["__metadata__"]["imdprompter"] = json.dumps(inner, sort_keys=True)
    raw = json.dumps(header).encode()
    raw += b" " * ((8 - len(raw) % 8) % 8)
    return struct.pack("<Q", len(raw)) + raw + data[8 + n:]


def test_checkpoint_version_and_corruption(trained_tiny, tmp_path):
    data = pipeline.checkpoint_bytes(trained_tiny.model)
    bumped = tmp_path / "v.safetensors"
    bumped.write_bytes(_rewrite_header(data, lambda h: h.update(version=99)))
    with pytest.raises(VersionMismatch):
        pipeline.load_checkpoint(bumped)
    truncated = tmp_path / "t.safetensors"
    truncated.write_bytes(data[:len(data) // 2])
    with pytest.raises(CorruptFile):
        pipeline.load_checkpoint(truncated)
    flipped = bytearray(data)
    flipped[-3] ^= 0xFF
    bad = tmp_path / "f.safetensors"
    bad.write_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        pipeline.load_checkpoint(bad)
    with pytest.raises(CorruptFile):
        pipeline.load_checkpoint(tmp_path / "missing.safetensors")


def test_sweep_shape_and_identity_rows(trained_tiny, small_samples):
    predictor = pipeline.Predictor(trained_tiny.model)
    rows = pipeline.robustness_sweep(predictor, small_samples, "tiny")
    assert [spec.name for spec, _ in rows] == [s.name for s in dataio.robustness_grid()]
    assert len(rows) == 12
    plain = pipeline.evaluate(predictor, small_samples, "tiny")
    for spec, report in rows:
        if spec.is_identity:
            assert report.row() | {"dataset": "tiny"} == plain.row()


def test_loss_log_columns(trained_tiny, tmp_path):
    pipeline.write_loss_log(trained_tiny.history, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,seg_sam,seg_p,cpc,img_level,total"
    assert len(lines) == 1 + len(trained_tiny.history)
    first = lines[1].split(",")
    assert first[0] == "1" and math.isfinite(float(first[-1]))


def test_image_sample_fields_unchanged_by_training(small_samples):
    snap = [(s.image.copy(), s.mask.copy()) for s in small_samples]
    pipeline.train(small_samples, tiny_config(augment=True, crop_size=24), steps=2)
    for s, (img, mask) in zip(small_samples, snap):
        assert np.array_equal(s.image, img) and np.array_equal(s.mask, mask)
    assert isinstance(small_samples[0], ImageSample)
