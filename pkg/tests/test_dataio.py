import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from imdprompter.dataio import (BLUR_GRID, JPEG_GRID, DegradationSpec, augment, crop, degrade, hflip,
                                jpeg_bytes, load_dataset, make_authentic, make_synthetic_set, preprocess,
                                robustness_grid, synthesize_splice, unnormalize, write_dataset)
from imdprompter.errors import DataError, MissingMask, RegionTooLarge
from imdprompter.types import ImageSample


def sample_with_mask(h=16, w=16, box=(2, 2, 4, 4), sid="s"):
    img = np.arange(h * w * 3, dtype=np.float64).reshape(h, w, 3) % 256
    mask = np.zeros((h, w), np.uint8)
    t, l, rh, rw = box
    mask[t:t + rh, l:l + rw] = 1
    return ImageSample(sid, img, mask, 1, "spli")


def _digest(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
        h.update(np.ascontiguousarray(s.mask).tobytes())
    return h.hexdigest()


@pytest.fixture
def small_root(tmp_path, rng):
    a = make_authentic(rng, 16, "c_auth")
    pos = [sample_with_mask(sid="a_pos"), sample_with_mask(box=(5, 6, 3, 7), sid="b_pos")]
    write_dataset(pos + [a], tmp_path / "ds")
    return tmp_path / "ds"


def test_load_dataset(small_root):
    samples = load_dataset(small_root)
    assert [s.id for s in samples] == ["a_pos", "b_pos", "c_auth"]
    assert [s.label for s in samples] == [1, 1, 0]
    assert not samples[2].mask.any()
    assert samples[0].mask.sum() == 16
    assert _digest(samples) == _digest(load_dataset(small_root))


def test_authentic_without_mask_file(small_root):
    (small_root / "masks" / "c_auth.png").unlink()
    auth = load_dataset(small_root)[2]
    assert auth.mask.shape == auth.image.shape[:2] and not auth.mask.any()


def test_missing_mask_for_positive(small_root):
    (small_root / "masks" / "a_pos.png").unlink()
    with pytest.raises(MissingMask):
        load_dataset(small_root)


def test_not_a_dataset(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_preprocess_constants_and_padding():
    img = np.zeros((10, 12, 3))
    img[..., 0] = 123.675
    img[..., 1] = 116.28
    img[..., 2] = 103.53
    mask = np.ones((10, 12), np.uint8)
    out = preprocess(img, 16, mask)
    assert out.image.shape == (3, 16, 16)
    assert np.abs(out.image[:, :10, :12]).max() < 1e-6
    assert np.all(out.image[:, 10:, :] == 0) and np.all(out.image[:, :, 12:] == 0)
    assert np.all(out.mask[10:, :] == 255) and np.all(out.mask[:, 12:] == 255)
    assert np.all(out.mask[:10, :12] == 1)
    assert out.valid.sum() == 120


def test_preprocess_red_channel_single_value():
    img = np.full((4, 4, 3), 200.0)
    img[0, 0, 0] = 123.675
    assert preprocess(img, 4).image[0, 0, 0] == pytest.approx(0.0, abs=1e-6)


@given(st.integers(0, 2**31))
def test_preprocess_round_trip(seed):
    img = np.random.default_rng(seed).uniform(0, 255, (8, 8, 3))
    back = unnormalize(preprocess(img, 8).image.astype(np.float64))
    assert np.abs(back - img).max() < 1e-5


def test_preprocess_downscales_only():
    big = preprocess(np.zeros((32, 16, 3)), 16)
    assert (big.height, big.width) == (16, 8)
    small = preprocess(np.zeros((5, 7, 3)), 16)
    assert (small.height, small.width) == (5, 7)


def test_flip_is_involution(rng):
    s = sample_with_mask()
    twice = hflip(hflip(s))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


def test_crop_labels():
    s = sample_with_mask(box=(2, 2, 8, 8))
    inside = crop(s, 3, 3, 4, 4)
    assert inside.mask.all() and inside.label == 1
    outside = crop(s, 11, 11, 4, 4)
    assert not outside.mask.any() and outside.label == 0


@given(st.integers(0, 2**31))
def test_augment_geometry_shared(seed):
    # encode each pixel's coordinates in the image; the mask must follow the same map
    h = w = 12
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.stack([yy, xx, np.zeros_like(yy)], -1).astype(np.float64)
    mask = ((yy * w + xx) % 3 == 0).astype(np.uint8)
    s = ImageSample("g", img, mask, 1, "spli")
    out = augment(s, np.random.default_rng(seed), crop_size=7)
    src_y = out.image[..., 0].astype(int)
    src_x = out.image[..., 1].astype(int)
    np.testing.assert_array_equal(out.mask, mask[src_y, src_x])
    assert out.label == int(out.mask.any())


def test_splice_constructive(rng):
    host = make_authentic(rng, 16, "h")
    donor = make_authentic(rng, 16, "d")
    out = synthesize_splice(host, donor, rng, region=(2, 2, 4, 4), shape="rect")
    assert out.mask.sum() == 16
    assert np.array_equal(np.argwhere(out.mask)[[0, -1]], [[2, 2], [5, 5]])
    assert out.label == 1
    outside = out.mask == 0
    assert np.array_equal(out.image[outside], host.image[outside])


def test_splice_bad_regions(rng):
    host = make_authentic(rng, 16, "h")
    with pytest.raises(RegionTooLarge):
        synthesize_splice(host, host, rng, region=(0, 0, 0, 4))
    with pytest.raises(RegionTooLarge):
        synthesize_splice(host, host, rng, region=(10, 10, 8, 8))


def test_synthetic_set_deterministic_and_consistent():
    def build():
        rng = np.random.default_rng(5)
        pool = [make_authentic(rng, 32, f"a{i}") for i in range(4)]
        return make_synthetic_set(pool, 6, rng, copy_move_prob=0.5)

    a, b = build(), build()
    assert _digest(a) == _digest(b)
    assert all(s.label == int(s.mask.any()) for s in a)
    assert sum(s.label for s in a) == 6


def test_blur_identity_and_constant(rng):
    img = rng.uniform(0, 255, (20, 20, 3))
    assert degrade(img, DegradationSpec("blur", 0)) is img
    const = np.full((20, 20, 3), 91.0)
    for k in BLUR_GRID[1:]:
        np.testing.assert_allclose(degrade(const, DegradationSpec("blur", k)), 91.0, atol=1e-9)


def test_jpeg_identity_and_requantisation(rng):
    img = make_authentic(rng, 64).image
    assert degrade(img, DegradationSpec("jpeg", 100)) is img
    once = degrade(img, DegradationSpec("jpeg", 50))
    twice = degrade(once, DegradationSpec("jpeg", 50))
    diff1 = int((np.rint(img) != once).any(-1).sum())
    diff2 = int((once != twice).any(-1).sum())
    assert diff2 <= diff1


def test_jpeg_size_monotone_in_quality(rng):
    img = make_authentic(rng, 64).image
    sizes = [len(jpeg_bytes(img, q)) for q in sorted(JPEG_GRID)]
    assert sizes == sorted(sizes)


def test_grid_order_and_validation():
    names = [s.name for s in robustness_grid()]
    assert names[:6] == [f"jpeg-{q}" for q in (100, 90, 80, 70, 60, 50)]
    assert names[6:] == [f"blur-{k}" for k in (0, 5, 11, 17, 23, 29)]
    with pytest.raises(ValueError):
        DegradationSpec("jpeg", 75)
    with pytest.raises(ValueError):
        DegradationSpec("noise", 1)


def test_written_masks_are_binary_png(small_root):
    arr = np.asarray(Image.open(small_root / "masks" / "a_pos.png"))
    assert set(np.unique(arr).tolist()) == {0, 255}
