"""Training-time augmentation operators.

Local operators (random erasing, soft random erasing, random patch, self patch
mixing) touch only their sampled rectangles. AugMix mixes several chains of
photometric and geometric ops that do not overlap the test corruptions.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
import logging
import math
from typing import Callable, Deque, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from PIL import Image as PILImage, ImageOps

from .const import (
    AUGMIX_ALPHA,
    AUGMIX_DEPTH,
    AUGMIX_MAX_ROTATE,
    AUGMIX_MAX_SHEAR,
    AUGMIX_MAX_TRANSLATE,
    AUGMIX_OPS,
    AUGMIX_SEVERITY,
    AUGMIX_WIDTH,
    ERASE_AREA_RANGE,
    ERASE_ASPECT_RANGE,
    ERASE_ATTEMPTS,
    ERASE_MEAN,
    ERASE_PROBABILITY,
    ERASE_RETAIN_RATIO,
    FILL_MEAN,
    FILL_RANDOM,
    PATCH_AREA_RANGE,
    PATCH_ASPECT_RANGE,
    PATCH_MIX_COEF,
    PATCH_POOL_CAPACITY,
)
from .corruptions import CorruptionType
from .errors import UsageError
from .imaging import check_image, quantize, resize, tile_grid
from .rng import derive_seed, make_rng

_LOGGER = logging.getLogger(__name__)

Range = Tuple[float, float]


class Region(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def slices(self) -> Tuple[slice, slice]:
        return (
            slice(self.top, self.top + self.height),
            slice(self.left, self.left + self.width),
        )

    @property
    def area(self) -> int:
        return self.height * self.width


def _check_range(name: str, value: Range, upper: Optional[float] = None) -> Range:
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise UsageError(f"{name} must be a (lo, hi) pair, got {value!r}") from None
    if not 0 < lo <= hi or (upper is not None and hi > upper):
        bound = "" if upper is None else f" <= {upper}"
        raise UsageError(f"{name} must satisfy 0 < lo <= hi{bound}, got {value!r}")
    return (lo, hi)


def _check_unit(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"{name} must be in [0, 1], got {value!r}")
    return float(value)


@dataclass(frozen=True)
class EraseParams:
    probability: float = ERASE_PROBABILITY
    area_ratio_range: Range = ERASE_AREA_RANGE
    aspect_ratio_range: Range = ERASE_ASPECT_RANGE
    retain_ratio: float = ERASE_RETAIN_RATIO
    fill: str = FILL_RANDOM
    mean: Tuple[float, float, float] = ERASE_MEAN

    def __post_init__(self) -> None:
        object.__setattr__(self, "probability", _check_unit("probability", self.probability))
        object.__setattr__(self, "retain_ratio", _check_unit("retain_ratio", self.retain_ratio))
        object.__setattr__(
            self, "area_ratio_range", _check_range("area_ratio_range", self.area_ratio_range)
        )
        object.__setattr__(
            self,
            "aspect_ratio_range",
            _check_range("aspect_ratio_range", self.aspect_ratio_range),
        )
        if self.fill not in (FILL_RANDOM, FILL_MEAN):
            raise UsageError(f"fill must be {FILL_RANDOM!r} or {FILL_MEAN!r}")


@dataclass(frozen=True)
class PatchMixParams:
    block_area_range: Range = PATCH_AREA_RANGE
    mix_coef: float = PATCH_MIX_COEF
    pool_capacity: int = PATCH_POOL_CAPACITY

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "block_area_range",
            _check_range("block_area_range", self.block_area_range, upper=1.0),
        )
        object.__setattr__(self, "mix_coef", _check_unit("mix_coef", self.mix_coef))
        if isinstance(self.pool_capacity, bool) or int(self.pool_capacity) != self.pool_capacity:
            raise UsageError(f"pool_capacity must be an integer, got {self.pool_capacity!r}")
        if self.pool_capacity < 1:
            raise UsageError(f"pool_capacity must be >= 1, got {self.pool_capacity}")


class PatchPool:
    """Patches cut by :func:`random_patch`, oldest first.

    Holds at most ``capacity`` patches and drops the oldest on overflow. The
    pool is updated in place and has a single writer.
    """

    def __init__(self, capacity: int = PATCH_POOL_CAPACITY) -> None:
        self._patches: Deque[np.ndarray] = deque(maxlen=capacity)

    @property
    def capacity(self) -> Optional[int]:
        return self._patches.maxlen

    def __len__(self) -> int:
        return len(self._patches)

    def __getitem__(self, index: int) -> np.ndarray:
        return self._patches[index]

    def add(self, patch: np.ndarray, capacity: Optional[int] = None) -> None:
        if capacity is not None and capacity != self._patches.maxlen:
            self._patches = deque(self._patches, maxlen=capacity)
        patch = patch.copy()
        patch.setflags(write=False)
        self._patches.append(patch)

    def snapshot(self) -> Tuple[np.ndarray, ...]:
        return tuple(self._patches)


def _sample_rect(
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    area_range: Range,
    aspect_range: Range,
) -> Optional[Region]:
    height, width = shape[:2]
    area = height * width
    lo, hi = area_range
    for _ in range(ERASE_ATTEMPTS):
        target = rng.uniform(lo, hi) * area
        aspect = rng.uniform(*aspect_range)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if not (0 < h <= height and 0 < w <= width):
            continue
        if not lo <= h * w / area <= hi:
            continue
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        return Region(top, left, h, w)
    return None


def _erase_plan(rng: np.random.Generator, shape, p: EraseParams) -> Optional[Region]:
    if rng.random() >= p.probability:
        return None
    region = _sample_rect(rng, shape, p.area_ratio_range, p.aspect_ratio_range)
    if region is None:
        _LOGGER.debug("No erase rectangle fits %s after %s attempts", shape, ERASE_ATTEMPTS)
    return region


def _fill(rng: np.random.Generator, region: Region, p: EraseParams) -> np.ndarray:
    if p.fill == FILL_RANDOM:
        return rng.integers(0, 256, size=(region.height, region.width, 3), dtype=np.uint8)
    mean = quantize(np.asarray(p.mean, dtype=np.float32))
    return np.broadcast_to(mean, (region.height, region.width, 3)).copy()


def erase_region(shape: Tuple[int, ...], p: EraseParams, seed: int) -> Optional[Region]:
    """Rectangle that :func:`random_erasing` or :func:`soft_random_erasing` picks
    for ``seed``, or ``None`` when the image is left unchanged."""
    return _erase_plan(make_rng(seed), shape, p)


def random_erasing(img: np.ndarray, p: EraseParams, seed: int) -> np.ndarray:
    check_image(img)
    rng = make_rng(seed)
    out = img.copy()
    region = _erase_plan(rng, img.shape, p)
    if region is not None:
        out[region.slices] = _fill(rng, region, p)
    return out


def soft_random_erasing(img: np.ndarray, p: EraseParams, seed: int) -> np.ndarray:
    """Like :func:`random_erasing`, but each pixel inside the rectangle keeps its
    value with probability ``p.retain_ratio``."""
    check_image(img)
    rng = make_rng(seed)
    out = img.copy()
    region = _erase_plan(rng, img.shape, p)
    if region is not None:
        fill = _fill(rng, region, p)
        replace = rng.random((region.height, region.width)) >= p.retain_ratio
        block = out[region.slices]
        block[replace] = fill[replace]
    return out


def _block_region(rng: np.random.Generator, shape, area_range: Range) -> Region:
    height, width = shape[:2]
    area = rng.uniform(*area_range) * height * width
    aspect = rng.uniform(*PATCH_ASPECT_RANGE)
    h = min(height, max(1, int(round(math.sqrt(area * aspect)))))
    w = min(width, max(1, int(round(math.sqrt(area / aspect)))))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return Region(top, left, h, w)


def random_patch(
    img: np.ndarray, pool: PatchPool, p: PatchMixParams, seed: int
) -> Tuple[np.ndarray, PatchPool]:
    """Paste a stored patch onto ``img`` and add a block of ``img`` to the pool.

    Patches larger than the image are shrunk, keeping their aspect ratio.
    """
    check_image(img)
    rng = make_rng(seed)
    height, width = img.shape[:2]
    block = img[_block_region(rng, img.shape, p.block_area_range).slices]
    out = img.copy()
    if len(pool):
        patch = pool[int(rng.integers(len(pool)))]
        ph, pw = patch.shape[:2]
        if ph > height or pw > width:
            scale = min(height / ph, width / pw)
            patch = resize(patch, max(1, int(pw * scale)), max(1, int(ph * scale)))
            ph, pw = patch.shape[:2]
        top = int(rng.integers(0, height - ph + 1))
        left = int(rng.integers(0, width - pw + 1))
        out[top:top + ph, left:left + pw] = patch
    pool.add(block, p.pool_capacity)
    return out, pool


def _self_patch_plan(rng: np.random.Generator, shape, p: PatchMixParams) -> Tuple[Region, Region]:
    height, width = shape[:2]
    source = _block_region(rng, shape, p.block_area_range)
    if height - source.height + 1 == 1 and width - source.width + 1 == 1:
        return source, source
    while True:
        top = int(rng.integers(0, height - source.height + 1))
        left = int(rng.integers(0, width - source.width + 1))
        if (top, left) != (source.top, source.left):
            return source, Region(top, left, source.height, source.width)


def self_patch_regions(shape: Tuple[int, ...], p: PatchMixParams, seed: int) -> Tuple[Region, Region]:
    """(source, target) regions :func:`self_patch_mixing` uses for ``seed``."""
    return _self_patch_plan(make_rng(seed), shape, p)


def self_patch_mixing(img: np.ndarray, p: PatchMixParams, seed: int) -> np.ndarray:
    check_image(img)
    source, target = _self_patch_plan(make_rng(seed), img.shape, p)
    src = img[source.slices].astype(np.float64)
    dst = img[target.slices].astype(np.float64)
    blended = np.floor(p.mix_coef * src + (1.0 - p.mix_coef) * dst + 0.5)
    out = img.copy()
    out[target.slices] = np.clip(blended, 0, 255).astype(np.uint8)
    return out


# AugMix


def _level(rng: np.random.Generator, severity: int, maxval: float) -> float:
    return float(rng.uniform(0.1, severity)) * maxval / 10.0


def _signed(rng: np.random.Generator, value: float) -> float:
    return -value if rng.random() > 0.5 else value


def _affine(pil: PILImage.Image, coeffs: Tuple[float, ...]) -> PILImage.Image:
    return pil.transform(
        pil.size, PILImage.Transform.AFFINE, coeffs, resample=PILImage.Resampling.BILINEAR
    )


def _identity(pil, severity, rng):
    return pil


def _autocontrast(pil, severity, rng):
    return ImageOps.autocontrast(pil)


def _equalize(pil, severity, rng):
    return ImageOps.equalize(pil)


def _posterize(pil, severity, rng):
    return ImageOps.posterize(pil, 4 - int(_level(rng, severity, 4)))


def _rotate(pil, severity, rng):
    degrees = _signed(rng, _level(rng, severity, AUGMIX_MAX_ROTATE))
    return pil.rotate(degrees, resample=PILImage.Resampling.BILINEAR)


def _solarize(pil, severity, rng):
    return ImageOps.solarize(pil, 256 - int(_level(rng, severity, 256)))


def _shear_x(pil, severity, rng):
    level = _signed(rng, _level(rng, severity, AUGMIX_MAX_SHEAR))
    return _affine(pil, (1, level, 0, 0, 1, 0))


def _shear_y(pil, severity, rng):
    level = _signed(rng, _level(rng, severity, AUGMIX_MAX_SHEAR))
    return _affine(pil, (1, 0, 0, level, 1, 0))


def _translate_x(pil, severity, rng):
    level = _signed(rng, _level(rng, severity, AUGMIX_MAX_TRANSLATE * pil.size[0]))
    return _affine(pil, (1, 0, level, 0, 1, 0))


def _translate_y(pil, severity, rng):
    level = _signed(rng, _level(rng, severity, AUGMIX_MAX_TRANSLATE * pil.size[1]))
    return _affine(pil, (1, 0, 0, 0, 1, level))


AugOp = Callable[[PILImage.Image, int, np.random.Generator], PILImage.Image]

AUGMIX_OP_TABLE: Dict[str, AugOp] = {
    "identity": _identity,
    "autocontrast": _autocontrast,
    "equalize": _equalize,
    "posterize": _posterize,
    "rotate": _rotate,
    "solarize": _solarize,
    "shear_x": _shear_x,
    "shear_y": _shear_y,
    "translate_x": _translate_x,
    "translate_y": _translate_y,
}

_TEST_CORRUPTIONS = frozenset(t.value for t in CorruptionType)


@dataclass(frozen=True)
class AugMixParams:
    width: int = AUGMIX_WIDTH
    depth: int = AUGMIX_DEPTH
    dirichlet_alpha: float = AUGMIX_ALPHA
    beta_alpha: float = AUGMIX_ALPHA
    op_set: Tuple[str, ...] = AUGMIX_OPS
    severity: int = AUGMIX_SEVERITY
    skip_weight: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "op_set", tuple(self.op_set))
        if self.width < 1:
            raise UsageError(f"width must be >= 1, got {self.width}")
        if self.depth != -1 and self.depth < 1:
            raise UsageError(f"depth must be >= 1 or -1 for random, got {self.depth}")
        if self.dirichlet_alpha <= 0 or self.beta_alpha <= 0:
            raise UsageError("dirichlet_alpha and beta_alpha must be positive")
        if not self.op_set:
            raise UsageError("op_set must not be empty")
        clashing = sorted(set(self.op_set) & _TEST_CORRUPTIONS)
        if clashing:
            raise UsageError(f"op_set overlaps test corruptions: {', '.join(clashing)}")
        unknown = sorted(set(self.op_set) - set(AUGMIX_OP_TABLE))
        if unknown:
            raise UsageError(f"Unknown augmix ops: {', '.join(unknown)}")
        if not 1 <= self.severity <= 10:
            raise UsageError(f"severity must be in [1, 10], got {self.severity}")
        if self.skip_weight is not None:
            _check_unit("skip_weight", self.skip_weight)


@dataclass
class AugMixTrace:
    """Intermediate values of one :func:`augmix` call, before quantization."""

    weights: np.ndarray
    skip: float
    chains: List[np.ndarray] = field(default_factory=list)
    mixed: Optional[np.ndarray] = None


def augmix_trace(img: np.ndarray, p: AugMixParams, seed: int) -> AugMixTrace:
    check_image(img)
    rng = make_rng(seed)
    weights = rng.dirichlet([p.dirichlet_alpha] * p.width)
    skip = float(rng.beta(p.beta_alpha, p.beta_alpha))
    if p.skip_weight is not None:
        skip = p.skip_weight
    base = img.astype(np.float64) / 255.0
    trace = AugMixTrace(weights=weights, skip=skip)
    mix = np.zeros_like(base)
    for i in range(p.width):
        pil = PILImage.fromarray(img)
        depth = p.depth if p.depth > 0 else int(rng.integers(1, 4))
        for _ in range(depth):
            name = p.op_set[int(rng.integers(len(p.op_set)))]
            pil = AUGMIX_OP_TABLE[name](pil, p.severity, rng)
        chain = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
        trace.chains.append(chain)
        mix += weights[i] * chain
    trace.mixed = skip * base + (1.0 - skip) * mix
    return trace


def augmix(img: np.ndarray, p: AugMixParams, seed: int) -> np.ndarray:
    return quantize(augmix_trace(img, p, seed).mixed)


PREVIEW_OPS = ("erase", "soft-erase", "random-patch", "self-patch", "augmix")


def preview_grid(
    img: np.ndarray,
    op: str,
    count: int,
    seed: int,
    *,
    erase: Optional[EraseParams] = None,
    patch: Optional[PatchMixParams] = None,
    mix: Optional[AugMixParams] = None,
    columns: int = 8,
) -> np.ndarray:
    """Sheet with the clean image first, then ``count`` augmented samples."""
    check_image(img)
    if op not in PREVIEW_OPS:
        raise UsageError(f"Unknown preview op {op!r}, expected one of {PREVIEW_OPS}")
    erase = erase or EraseParams(probability=1.0)
    patch = patch or PatchMixParams()
    mix = mix or AugMixParams()
    samples: List[np.ndarray] = [img]
    pool = PatchPool()
    for i in range(count):
        sample_seed = derive_seed(seed, i)
        if op == "erase":
            samples.append(random_erasing(img, erase, sample_seed))
        elif op == "soft-erase":
            samples.append(soft_random_erasing(img, erase, sample_seed))
        elif op == "random-patch":
            out, pool = random_patch(img, pool, patch, sample_seed)
            samples.append(out)
        elif op == "self-patch":
            samples.append(self_patch_mixing(img, patch, sample_seed))
        else:
            samples.append(augmix(img, mix, sample_seed))
    return tile_grid(samples, min(columns, len(samples)))
