"""Test the training augmentation operators."""
import numpy as np
import pytest

from reid_robustness.augment import (
    AugMixParams,
    EraseParams,
    PatchMixParams,
    PatchPool,
    augmix,
    augmix_trace,
    erase_region,
    preview_grid,
    random_erasing,
    random_patch,
    self_patch_mixing,
    self_patch_regions,
    soft_random_erasing,
)
from reid_robustness.const import FILL_MEAN
from reid_robustness.errors import UsageError
from reid_robustness.imaging import quantize

ALWAYS = EraseParams(probability=1.0)


def _outside(img, region):
    mask = np.ones(img.shape[:2], dtype=bool)
    mask[region.slices] = False
    return img[mask]


def test_erase_never_fires_at_probability_zero(image):
    p = EraseParams(probability=0.0)
    for seed in range(20):
        assert np.array_equal(random_erasing(image, p, seed), image)
        assert erase_region(image.shape, p, seed) is None


@pytest.mark.parametrize("seed", range(100))
def test_erase_touches_only_its_region(image, seed):
    region = erase_region(image.shape, ALWAYS, seed)
    assert region is not None
    height, width = image.shape[:2]
    assert 0 <= region.top and region.top + region.height <= height
    assert 0 <= region.left and region.left + region.width <= width
    assert 0.02 <= region.area / (height * width) <= 0.4
    out = random_erasing(image, ALWAYS, seed)
    assert np.array_equal(_outside(out, region), _outside(image, region))


def test_erase_mean_fill():
    img = np.full((64, 32, 3), 10, dtype=np.uint8)
    p = EraseParams(probability=1.0, fill=FILL_MEAN)
    region = erase_region(img.shape, p, 3)
    out = random_erasing(img, p, 3)
    expected = quantize(np.asarray(p.mean, dtype=np.float32))
    assert (out[region.slices] == expected).all()


def test_soft_erasing_retain_ratio_bounds():
    img = np.full((64, 32, 3), 10, dtype=np.uint8)
    keep_all = EraseParams(probability=1.0, retain_ratio=1.0, fill=FILL_MEAN)
    assert np.array_equal(soft_random_erasing(img, keep_all, 4), img)
    replace_all = EraseParams(probability=1.0, retain_ratio=0.0, fill=FILL_MEAN)
    region = erase_region(img.shape, replace_all, 4)
    out = soft_random_erasing(img, replace_all, 4)
    assert (out[region.slices] != 10).all()
    assert np.array_equal(_outside(out, region), _outside(img, region))


def test_soft_erasing_keeps_half_the_pixels():
    img = np.full((256, 128, 3), 10, dtype=np.uint8)
    p = EraseParams(probability=1.0, retain_ratio=0.5, fill=FILL_MEAN, area_ratio_range=(0.3, 0.4))
    region = erase_region(img.shape, p, 8)
    assert region is not None
    assert region.area >= 2000
    block = soft_random_erasing(img, p, 8)[region.slices]
    kept = (block == 10).all(axis=2).mean()
    assert kept == pytest.approx(0.5, abs=0.05)


@pytest.mark.parametrize("seed", range(100))
def test_soft_erase_touches_only_its_region(image, seed):
    p = EraseParams(probability=1.0, retain_ratio=0.5)
    region = erase_region(image.shape, p, seed)
    assert region is not None
    out = soft_random_erasing(image, p, seed)
    assert np.array_equal(_outside(out, region), _outside(image, region))


def test_erase_params_validation():
    with pytest.raises(UsageError):
        EraseParams(probability=1.5)
    with pytest.raises(UsageError):
        EraseParams(area_ratio_range=(0.5, 0.1))
    with pytest.raises(UsageError):
        EraseParams(fill="zeros")


def test_random_patch_pool(image):
    p = PatchMixParams(pool_capacity=2)
    pool = PatchPool()
    out, pool = random_patch(image, pool, p, 1)
    assert np.array_equal(out, image)
    assert len(pool) == 1
    for seed in (2, 3, 4):
        out, pool = random_patch(image, pool, p, seed)
        assert out.shape == image.shape
    assert len(pool) == 2


def test_patch_pool_drops_oldest():
    pool = PatchPool(capacity=3)
    for value in range(5):
        pool.add(np.full((2, 2, 3), value, dtype=np.uint8))
    assert len(pool) == 3
    assert pool.capacity == 3
    assert [int(patch[0, 0, 0]) for patch in pool.snapshot()] == [2, 3, 4]
    pool.add(np.full((2, 2, 3), 5, dtype=np.uint8), capacity=2)
    assert pool.capacity == 2
    assert [int(patch[0, 0, 0]) for patch in pool.snapshot()] == [4, 5]
    assert not pool[0].flags.writeable


def test_patch_pool_copies_patches():
    source = np.zeros((2, 2, 3), dtype=np.uint8)
    pool = PatchPool()
    pool.add(source)
    source[:] = 7
    assert (pool[0] == 0).all()


@pytest.mark.parametrize("seed", range(100))
def test_random_patch_touches_only_the_pasted_block(image, seed):
    pool = PatchPool()
    pool.add(np.full((12, 8, 3), 250, dtype=np.uint8))
    out, pool = random_patch(image, pool, PatchMixParams(), seed)
    changed = (out != image).any(axis=2)
    rows = np.flatnonzero(changed.any(axis=1))
    cols = np.flatnonzero(changed.any(axis=0))
    assert rows.size and cols.size
    assert rows[-1] - rows[0] + 1 <= 12
    assert cols[-1] - cols[0] + 1 <= 8
    assert len(pool) == 2


def test_random_patch_pastes_a_stored_patch():
    dark = np.zeros((64, 32, 3), dtype=np.uint8)
    light = np.full((64, 32, 3), 200, dtype=np.uint8)
    p = PatchMixParams()
    _, pool = random_patch(light, PatchPool(), p, 1)
    out, pool = random_patch(dark, pool, p, 2)
    assert (out == 200).any()
    assert len(pool) == 2


def test_random_patch_shrinks_large_patches():
    big = np.full((128, 64, 3), 90, dtype=np.uint8)
    small = np.zeros((16, 16, 3), dtype=np.uint8)
    p = PatchMixParams(block_area_range=(0.9, 1.0))
    _, pool = random_patch(big, PatchPool(), p, 5)
    out, _ = random_patch(small, pool, p, 6)
    assert out.shape == small.shape
    assert (out == 90).any()


@pytest.mark.parametrize("seed", range(100))
def test_self_patch_mixing(image, seed):
    p = PatchMixParams()
    source, target = self_patch_regions(image.shape, p, seed)
    assert (source.height, source.width) == (target.height, target.width)
    assert (source.top, source.left) != (target.top, target.left)
    out = self_patch_mixing(image, p, seed)
    src = image[source.slices].astype(np.float64)
    dst = image[target.slices].astype(np.float64)
    expected = np.floor(0.5 * src + 0.5 * dst + 0.5).astype(np.uint8)
    assert np.array_equal(out[target.slices], expected)
    assert np.array_equal(_outside(out, target), _outside(image, target))


def test_augmix_trace(image):
    p = AugMixParams()
    trace = augmix_trace(image, p, 21)
    assert len(trace.chains) == 3
    assert trace.weights.sum() == pytest.approx(1.0)
    assert 0.0 <= trace.skip <= 1.0
    mix = sum(w * c for w, c in zip(trace.weights, trace.chains))
    expected = trace.skip * image / 255.0 + (1 - trace.skip) * mix
    assert np.allclose(trace.mixed, expected)
    assert np.array_equal(augmix(image, p, 21), quantize(trace.mixed))


@pytest.mark.parametrize("seed", range(10))
def test_augmix_stays_between_its_inputs(image, seed):
    trace = augmix_trace(image, AugMixParams(), seed)
    stacked = np.stack([image / 255.0, *trace.chains])
    assert (trace.mixed >= stacked.min(axis=0) - 1e-12).all()
    assert (trace.mixed <= stacked.max(axis=0) + 1e-12).all()


def test_augmix_is_deterministic(image):
    p = AugMixParams(depth=2)
    assert np.array_equal(augmix(image, p, 3), augmix(image, p, 3))


def test_augmix_full_skip_returns_input(image):
    assert np.array_equal(augmix(image, AugMixParams(skip_weight=1.0), 9), image)


def test_augmix_rejects_test_corruptions():
    with pytest.raises(UsageError):
        AugMixParams(op_set=("rotate", "contrast"))
    with pytest.raises(UsageError):
        AugMixParams(op_set=("rotate", "warp"))
    with pytest.raises(UsageError):
        AugMixParams(depth=0)


def test_preview_grid(image):
    sheet = preview_grid(image, "erase", 3, 0)
    assert sheet.shape == (64, 4 * 32, 3)
    assert np.array_equal(sheet[:, :32], image)
    sheet = preview_grid(image, "random-patch", 9, 0)
    assert sheet.shape == (2 * 64, 8 * 32, 3)
    with pytest.raises(UsageError):
        preview_grid(image, "mixup", 3, 0)
