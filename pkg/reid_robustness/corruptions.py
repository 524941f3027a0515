"""Seeded image corruptions: 20 types at 5 severity levels.

Enumeration order is fixed: noise, blur, weather, digital, and within each
category the order of :class:`CorruptionType`. Every transform runs on a float32
copy scaled to [0, 1] and is quantized back to uint8 at the end. All randomness
comes from ``make_rng(spec.seed)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage import color as skcolor

from .const import (
    BRIGHTNESS_C,
    CATEGORY_BLUR,
    CATEGORY_DIGITAL,
    CATEGORY_NOISE,
    CATEGORY_WEATHER,
    CONTRAST_C,
    DEFOCUS_BLUR_C,
    ELASTIC_C,
    FOG_C,
    FROST_C,
    FROST_MASK_SEEDS,
    FROST_TINT,
    GAUSSIAN_BLUR_C,
    GAUSSIAN_NOISE_C,
    GLASS_BLUR_C,
    IMPULSE_NOISE_C,
    JPEG_C,
    MAX_SEVERITY,
    MOTION_BLUR_C,
    MUD_COLOR,
    PIXELATE_C,
    RAIN_ANGLE_RANGE,
    RAIN_C,
    SATURATE_C,
    SHOT_NOISE_C,
    SNOW_C,
    SNOW_LAYER,
    SPATTER_C,
    SPECKLE_NOISE_C,
    WATER_COLOR,
    ZOOM_BLUR_C,
)
from .errors import UsageError
from .frost import frost_overlay
from .imaging import (
    check_image,
    grayscale,
    jpeg_round_trip,
    quantize,
    read_image,
    to_float,
    write_png,
)
from .rng import check_seed, make_rng

_LOGGER = logging.getLogger(__name__)

SEVERITIES = tuple(range(1, MAX_SEVERITY + 1))


class CorruptionType(str, Enum):
    """The 20 corruption types in enumeration order."""

    GAUSSIAN_NOISE = "gaussian-noise"
    SHOT = "shot"
    IMPULSE = "impulse"
    SPECKLE = "speckle"
    DEFOCUS = "defocus"
    GLASS = "glass"
    MOTION = "motion"
    ZOOM = "zoom"
    GAUSSIAN_BLUR = "gaussian-blur"
    SNOW = "snow"
    FROST = "frost"
    FOG = "fog"
    BRIGHTNESS = "brightness"
    SPATTER = "spatter"
    RAIN = "rain"
    CONTRAST = "contrast"
    ELASTIC = "elastic"
    PIXELATE = "pixelate"
    JPEG = "jpeg"
    SATURATE = "saturate"

    @property
    def category(self) -> str:
        return _CATEGORY[self]

    @property
    def position(self) -> int:
        return _ORDER.index(self)

    @classmethod
    def from_name(cls, name: str) -> "CorruptionType":
        try:
            return cls(name)
        except ValueError:
            raise UsageError(f"Unknown corruption type {name!r}") from None


_ORDER: List[CorruptionType] = list(CorruptionType)

_CATEGORY: Dict[CorruptionType, str] = {
    **{t: CATEGORY_NOISE for t in _ORDER[0:4]},
    **{t: CATEGORY_BLUR for t in _ORDER[4:9]},
    **{t: CATEGORY_WEATHER for t in _ORDER[9:15]},
    **{t: CATEGORY_DIGITAL for t in _ORDER[15:20]},
}

# Types whose output depends on the seed
STOCHASTIC_TYPES = frozenset(
    {
        CorruptionType.GAUSSIAN_NOISE,
        CorruptionType.SHOT,
        CorruptionType.IMPULSE,
        CorruptionType.SPECKLE,
        CorruptionType.GLASS,
        CorruptionType.MOTION,
        CorruptionType.SNOW,
        CorruptionType.FROST,
        CorruptionType.FOG,
        CorruptionType.SPATTER,
        CorruptionType.RAIN,
        CorruptionType.ELASTIC,
    }
)


@dataclass(frozen=True)
class CorruptionSpec:
    ctype: CorruptionType
    severity: int
    seed: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.ctype, CorruptionType):
            object.__setattr__(self, "ctype", CorruptionType.from_name(self.ctype))
        if isinstance(self.severity, bool) or not isinstance(self.severity, int):
            raise UsageError(f"severity must be an integer, got {self.severity!r}")
        if not 0 <= self.severity <= MAX_SEVERITY:
            raise UsageError(f"severity {self.severity} outside [0, {MAX_SEVERITY}]")
        try:
            check_seed(self.seed)
        except (TypeError, ValueError) as err:
            raise UsageError(str(err)) from err

    @property
    def is_identity(self) -> bool:
        return self.severity == 0

    def as_dict(self) -> dict:
        return {"type": self.ctype.value, "severity": self.severity, "seed": self.seed}


class CorruptionEntry(NamedTuple):
    ctype: CorruptionType
    category: str
    severities: Tuple[int, ...]


def list_corruptions() -> List[CorruptionEntry]:
    return [CorruptionEntry(t, t.category, SEVERITIES) for t in _ORDER]


def corruption_grid() -> List[Tuple[CorruptionType, int]]:
    """All 100 (type, severity) cells in enumeration order."""
    return [(t, s) for t in _ORDER for s in SEVERITIES]


def parse_spec(text: str) -> Tuple[CorruptionType, int]:
    """Parse ``"type:severity"``, e.g. ``"snow:3"``."""
    name, sep, level = text.partition(":")
    if not sep or not level.isdigit():
        raise UsageError(f"Expected TYPE:SEVERITY, got {text!r}")
    severity = int(level)
    if not 0 <= severity <= MAX_SEVERITY:
        raise UsageError(f"severity {severity} outside [0, {MAX_SEVERITY}]")
    return CorruptionType.from_name(name), severity


# Resampling and kernel helpers


def _sample(x: np.ndarray, rows: np.ndarray, cols: np.ndarray, order: int = 1) -> np.ndarray:
    """Sample every channel of ``x`` at fractional coordinates, clamping at edges."""
    coords = np.stack([rows, cols])
    out = np.empty(rows.shape + (x.shape[2],), dtype=np.float32)
    for ch in range(x.shape[2]):
        out[..., ch] = ndimage.map_coordinates(
            x[..., ch], coords, order=order, mode="nearest"
        )
    return out


def _zoom_about_center(x: np.ndarray, factor: float) -> np.ndarray:
    height, width = x.shape[:2]
    cy = (height - 1) / 2.0
    cx = (width - 1) / 2.0
    rows, cols = np.meshgrid(
        (np.arange(height) - cy) / factor + cy,
        (np.arange(width) - cx) / factor + cx,
        indexing="ij",
    )
    return _sample(x, rows, cols)


def _filter_channels(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for ch in range(x.shape[2]):
        out[..., ch] = ndimage.correlate(x[..., ch], kernel, mode="nearest")
    return out


def _disk(radius: float, alias_blur: float) -> np.ndarray:
    if radius <= 8:
        span = np.arange(-8, 8 + 1)
        half = 1
    else:
        span = np.arange(-radius, radius + 1)
        half = 2
    xx, yy = np.meshgrid(span, span)
    disk = np.array(radius**2 >= xx**2 + yy**2, dtype=np.float32)
    disk /= disk.sum()
    disk = ndimage.gaussian_filter(
        disk, sigma=alias_blur, truncate=half / alias_blur, mode="mirror"
    )
    return (disk / disk.sum()).astype(np.float32)


def _line_kernel(radius: float, sigma: float, angle: float) -> np.ndarray:
    """One-sided motion kernel: Gaussian-weighted taps along ``angle`` degrees,
    splatted bilinearly onto a square grid."""
    length = int(math.ceil(radius))
    size = 2 * length + 1
    kernel = np.zeros((size, size), dtype=np.float64)
    theta = math.radians(angle)
    for t in range(length + 1):
        weight = math.exp(-(t * t) / (2.0 * sigma * sigma))
        px = length + t * math.cos(theta)
        py = length + t * math.sin(theta)
        x0, y0 = int(math.floor(px)), int(math.floor(py))
        fx, fy = px - x0, py - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < size and 0 <= xx < size:
                    kernel[yy, xx] += weight * wy * wx
    kernel /= kernel.sum()
    return kernel.astype(np.float32)


def _plasma_fractal(mapsize: int, wibbledecay: float, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square heightmap in [0, 1]; ``mapsize`` must be a power of two."""
    maparray = np.empty((mapsize, mapsize), dtype=np.float64)
    maparray[0, 0] = 0
    stepsize = mapsize
    wibble = 100.0

    def wibbledmean(array: np.ndarray) -> np.ndarray:
        return array / 4 + wibble * rng.uniform(-wibble, wibble, array.shape)

    while stepsize >= 2:
        half = stepsize // 2
        corners = maparray[0:mapsize:stepsize, 0:mapsize:stepsize]
        squares = corners + np.roll(corners, shift=-1, axis=0)
        squares += np.roll(squares, shift=-1, axis=1)
        maparray[half:mapsize:stepsize, half:mapsize:stepsize] = wibbledmean(squares)

        centers = maparray[half:mapsize:stepsize, half:mapsize:stepsize]
        corners = maparray[0:mapsize:stepsize, 0:mapsize:stepsize]
        ltsum = centers + np.roll(centers, 1, axis=0)
        ltsum = ltsum + corners + np.roll(corners, -1, axis=1)
        maparray[0:mapsize:stepsize, half:mapsize:stepsize] = wibbledmean(ltsum)
        ttsum = centers + np.roll(centers, 1, axis=1)
        ttsum = ttsum + corners + np.roll(corners, -1, axis=0)
        maparray[half:mapsize:stepsize, 0:mapsize:stepsize] = wibbledmean(ttsum)

        stepsize //= 2
        wibble /= wibbledecay

    maparray -= maparray.min()
    return maparray / maparray.max()


def _hsv_adjust(x: np.ndarray, channel: int, scale: float, offset: float) -> np.ndarray:
    hsv = skcolor.rgb2hsv(x)
    hsv[..., channel] = np.clip(hsv[..., channel] * scale + offset, 0, 1)
    return skcolor.hsv2rgb(hsv).astype(np.float32)


# Noise


def _gaussian_noise(x, c, rng):
    return x + rng.normal(scale=c, size=x.shape).astype(np.float32)


def _shot(x, c, rng):
    return (rng.poisson(x.astype(np.float64) * c) / c).astype(np.float32)


def _impulse(x, c, rng):
    draw = rng.random(x.shape)
    out = x.copy()
    out[draw < c / 2] = 1.0
    out[(draw >= c / 2) & (draw < c)] = 0.0
    return out


def _speckle(x, c, rng):
    return x + x * rng.normal(scale=c, size=x.shape).astype(np.float32)


# Blur


def _defocus(x, c, rng):
    radius, alias_blur = c
    return _filter_channels(x, _disk(radius, alias_blur))


def _glass(x, c, rng):
    sigma, delta, iterations = c
    height, width = x.shape[:2]
    x = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="nearest")
    rows = range(height - delta, delta, -1)
    cols = range(width - delta, delta, -1)
    offsets = rng.integers(
        -delta, delta, size=(iterations, len(rows), len(cols), 2)
    ).tolist()
    # track pixel swaps as a permutation of flat indices, then gather once
    index = list(range(height * width))
    for it in range(iterations):
        for i, h in enumerate(rows):
            row_offsets = offsets[it][i]
            for j, w in enumerate(cols):
                dx, dy = row_offsets[j]
                a = h * width + w
                b = (h + dy) * width + (w + dx)
                index[a], index[b] = index[b], index[a]
    x = x.reshape(-1, 3)[np.asarray(index, dtype=np.int64)].reshape(height, width, 3)
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="nearest")


def _motion(x, c, rng):
    radius, sigma = c
    angle = rng.uniform(-45, 45)
    return _filter_channels(x, _line_kernel(radius, sigma, angle))


def _zoom(x, c, rng):
    start, stop, step = c
    factors = np.arange(start, stop, step)
    out = x.copy()
    for factor in factors:
        out += _zoom_about_center(x, float(factor))
    return out / np.float32(len(factors) + 1)


def _gaussian_blur(x, c, rng):
    return ndimage.gaussian_filter(x, sigma=(c, c, 0), mode="nearest")


# Weather


def _snow(x, c, rng):
    loc, blend = c
    scale, zoom, threshold, radius, sigma = SNOW_LAYER
    height, width = x.shape[:2]
    layer = rng.normal(loc=loc, scale=scale, size=(height, width, 1)).astype(np.float32)
    layer = _zoom_about_center(layer, zoom)
    layer[layer < threshold] = 0
    layer = np.clip(layer, 0, 1)
    layer = _filter_channels(layer, _line_kernel(radius, sigma, rng.uniform(-135, -45)))
    gray = grayscale(x)[..., np.newaxis]
    x = blend * x + (1 - blend) * np.maximum(x, gray * 1.5 + 0.5)
    return x + layer + np.rot90(layer, k=2)


def _frost(x, c, rng):
    opacity, haze = c
    height, width = x.shape[:2]
    index = int(rng.integers(len(FROST_MASK_SEEDS)))
    crystals = frost_overlay(index, height, width, rng)
    alpha = np.clip(opacity * crystals + haze, 0, 1)[..., np.newaxis]
    return x + alpha * (np.asarray(FROST_TINT, dtype=np.float32) - x)


def _fog(x, c, rng):
    strength, decay = c
    height, width = x.shape[:2]
    mapsize = 1 << max(1, (max(height, width) - 1).bit_length())
    fog = _plasma_fractal(mapsize, decay, rng)[:height, :width, np.newaxis]
    peak = x.max()
    return ((x + strength * fog) * peak / (peak + strength)).astype(np.float32)


def _brightness(x, c, rng):
    return _hsv_adjust(x, 2, 1.0, c)


def _spatter(x, c, rng):
    loc, scale, sigma, threshold, intensity, mud = c
    liquid = rng.normal(loc=loc, scale=scale, size=x.shape[:2])
    liquid = ndimage.gaussian_filter(liquid, sigma=sigma, mode="nearest")
    liquid[liquid < threshold] = 0
    if not mud:
        peak = liquid.max()
        highlight = liquid / peak if peak > 0 else liquid
        highlight = ndimage.gaussian_filter(highlight, sigma=1.0, mode="nearest")
        m = (highlight * intensity)[..., np.newaxis].astype(np.float32)
        water = np.asarray(WATER_COLOR, dtype=np.float32)
        # screen blend, water only lightens
        return 1 - (1 - x) * (1 - m * water)
    m = ndimage.gaussian_filter((liquid > threshold).astype(np.float32), sigma=intensity)
    m[m < 0.8] = 0
    m = m[..., np.newaxis]
    return x * (1 - m) + np.asarray(MUD_COLOR, dtype=np.float32) * m


def _rain(x, c, rng):
    density, base_length, alpha = c
    height, width = x.shape[:2]
    length = base_length * height / 256.0
    angle = rng.uniform(*RAIN_ANGLE_RANGE)
    count = max(1, int(round(density * width)))
    starts_x = rng.uniform(0, width, size=count)
    starts_y = rng.uniform(-length, height, size=count)
    theta = math.radians(angle)
    steps = np.arange(int(math.ceil(length)), dtype=np.float64)
    px = np.rint(starts_x[:, None] + steps[None, :] * math.sin(theta)).astype(np.int64)
    py = np.rint(starts_y[:, None] + steps[None, :] * math.cos(theta)).astype(np.int64)
    inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    layer = np.zeros((height, width, 1), dtype=np.float32)
    layer[py[inside], px[inside], 0] = 1.0
    # image y points down, so the streak direction is (sin, cos) in (x, y)
    streak_angle = math.degrees(math.atan2(math.cos(theta), math.sin(theta)))
    layer = _filter_channels(layer, _line_kernel(1, 1.0, streak_angle))
    return x * (1 - alpha * layer) + alpha * layer


# Digital


def _contrast(x, c, rng):
    means = x.mean(axis=(0, 1), keepdims=True, dtype=np.float64).astype(np.float32)
    return (x - means) * c + means


def _elastic(x, c, rng):
    amp_frac, sigma_frac, jitter_frac = c
    height, width = x.shape[:2]
    side = min(height, width)
    amplitude, sigma, jitter = amp_frac * side, sigma_frac * side, jitter_frac * side

    center = np.array([height // 2, width // 2], dtype=np.float64)
    square = side // 3
    src_pts = np.array(
        [
            center + square,
            [center[0] + square, center[1] - square],
            center - square,
        ]
    )
    dst_pts = src_pts + rng.uniform(-jitter, jitter, size=src_pts.shape)
    # inverse affine: output coordinates -> input coordinates
    inverse = np.linalg.solve(np.hstack([dst_pts, np.ones((3, 1))]), src_pts)

    def displacement() -> np.ndarray:
        field = ndimage.gaussian_filter(
            rng.uniform(-1, 1, size=(height, width)), sigma, mode="reflect", truncate=3
        )
        rms = math.sqrt(float(np.mean(field * field)))
        return field * (amplitude / rms) if rms > 0 else field

    d_row = displacement()
    d_col = displacement()
    grid_row, grid_col = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    q_row = grid_row + d_row
    q_col = grid_col + d_col
    rows = q_row * inverse[0, 0] + q_col * inverse[1, 0] + inverse[2, 0]
    cols = q_row * inverse[0, 1] + q_col * inverse[1, 1] + inverse[2, 1]
    return _sample(x, rows, cols)


def _pixelate(x, c, rng):
    height, width = x.shape[:2]
    small_h = max(1, int(height * c))
    small_w = max(1, int(width * c))
    # box average over one cell, then sample the cell centres
    cell = int(math.ceil(1.0 / c))
    x = ndimage.uniform_filter(x, size=(cell, cell, 1), mode="nearest")
    rows, cols = np.meshgrid(
        (np.arange(small_h) + 0.5) * height / small_h - 0.5,
        (np.arange(small_w) + 0.5) * width / small_w - 0.5,
        indexing="ij",
    )
    small = _sample(x, rows, cols)
    up_rows = ((np.arange(height) + 0.5) * small_h / height).astype(np.int64)
    up_cols = ((np.arange(width) + 0.5) * small_w / width).astype(np.int64)
    return small[up_rows][:, up_cols]


def _jpeg(x, c, rng):
    return to_float(jpeg_round_trip(quantize(x), c))


def _saturate(x, c, rng):
    scale, offset = c
    return _hsv_adjust(x, 1, scale, offset)


Transform = Callable[[np.ndarray, object, np.random.Generator], np.ndarray]

_TRANSFORMS: Dict[CorruptionType, Tuple[Transform, tuple]] = {
    CorruptionType.GAUSSIAN_NOISE: (_gaussian_noise, GAUSSIAN_NOISE_C),
    CorruptionType.SHOT: (_shot, SHOT_NOISE_C),
    CorruptionType.IMPULSE: (_impulse, IMPULSE_NOISE_C),
    CorruptionType.SPECKLE: (_speckle, SPECKLE_NOISE_C),
    CorruptionType.DEFOCUS: (_defocus, DEFOCUS_BLUR_C),
    CorruptionType.GLASS: (_glass, GLASS_BLUR_C),
    CorruptionType.MOTION: (_motion, MOTION_BLUR_C),
    CorruptionType.ZOOM: (_zoom, ZOOM_BLUR_C),
    CorruptionType.GAUSSIAN_BLUR: (_gaussian_blur, GAUSSIAN_BLUR_C),
    CorruptionType.SNOW: (_snow, SNOW_C),
    CorruptionType.FROST: (_frost, FROST_C),
    CorruptionType.FOG: (_fog, FOG_C),
    CorruptionType.BRIGHTNESS: (_brightness, BRIGHTNESS_C),
    CorruptionType.SPATTER: (_spatter, SPATTER_C),
    CorruptionType.RAIN: (_rain, RAIN_C),
    CorruptionType.CONTRAST: (_contrast, CONTRAST_C),
    CorruptionType.ELASTIC: (_elastic, ELASTIC_C),
    CorruptionType.PIXELATE: (_pixelate, PIXELATE_C),
    CorruptionType.JPEG: (_jpeg, JPEG_C),
    CorruptionType.SATURATE: (_saturate, SATURATE_C),
}


def severity_parameters(ctype: CorruptionType, severity: int):
    """Return the constants used for ``ctype`` at ``severity`` (1..5)."""
    return _TRANSFORMS[CorruptionType(ctype)][1][severity - 1]


def apply_corruption(img: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    check_image(img)
    if spec.is_identity:
        return img.copy()
    transform, table = _TRANSFORMS[spec.ctype]
    out = transform(to_float(img), table[spec.severity - 1], make_rng(spec.seed))
    return quantize(out)


def distortion_score(clean: np.ndarray, corrupted: np.ndarray) -> float:
    """Mean absolute per-channel difference scaled to [0, 1]."""
    if clean.shape != corrupted.shape:
        raise UsageError(
            f"Image dimensions differ: {clean.shape} vs {corrupted.shape}"
        )
    diff = np.abs(clean.astype(np.int64) - corrupted.astype(np.int64))
    return float(diff.sum()) / (diff.size * 255.0)


def corrupt_file(
    src: Union[str, Path], dst: Union[str, Path], spec: CorruptionSpec
) -> None:
    """Read a PNG or JPEG image, corrupt it and write the result as PNG."""
    write_png(apply_corruption(read_image(src), spec), dst)
    _LOGGER.debug("Corrupted %s -> %s with %s", src, dst, spec)
