"""Procedural frost overlays built from fractal Perlin noise."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .const import FROST_MASK_SEEDS, FROST_MASK_SIZE
from .rng import make_rng

_GRADIENTS = np.array([[0, 1], [0, -1], [1, 0], [-1, 0]], dtype=np.float64)


def _fade(t: np.ndarray) -> np.ndarray:
    return 6 * t**5 - 15 * t**4 + 10 * t**3


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    return a + t * (b - a)


def perlin(x: np.ndarray, y: np.ndarray, perm: np.ndarray) -> np.ndarray:
    xi = x.astype(np.int64) & 255
    yi = y.astype(np.int64) & 255
    xf = x - np.floor(x)
    yf = y - np.floor(y)
    u = _fade(xf)
    v = _fade(yf)

    def grad(h: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        g = _GRADIENTS[h % 4]
        return g[..., 0] * dx + g[..., 1] * dy

    n00 = grad(perm[perm[xi] + yi], xf, yf)
    n01 = grad(perm[perm[xi] + yi + 1], xf, yf - 1)
    n11 = grad(perm[perm[xi + 1] + yi + 1], xf - 1, yf - 1)
    n10 = grad(perm[perm[xi + 1] + yi], xf - 1, yf)
    return _lerp(_lerp(n00, n10, u), _lerp(n01, n11, u), v)


def fractal_noise(
    size: int, seed: int, *, octaves: int = 5, base_freq: float = 4.0
) -> np.ndarray:
    """Sum ``octaves`` Perlin layers, each at twice the frequency and half the
    amplitude of the previous one. Output is rescaled to [0, 1]."""
    rng = make_rng(seed)
    perm = rng.permutation(256)
    perm = np.concatenate([perm, perm])
    lin = np.arange(size, dtype=np.float64) / size
    total = np.zeros((size, size), dtype=np.float64)
    amplitude = 1.0
    freq = base_freq
    for _ in range(octaves):
        offset = rng.uniform(0, 256, size=2)
        gx, gy = np.meshgrid(lin * freq + offset[0], lin * freq + offset[1])
        total += amplitude * perlin(gx, gy, perm)
        amplitude *= 0.5
        freq *= 2
    total -= total.min()
    return total / total.max()


@lru_cache(maxsize=None)
def frost_mask(index: int) -> np.ndarray:
    """Return frost texture ``index`` (0..4) as read-only float32 crystal
    intensities in [0, 1]."""
    noise = fractal_noise(FROST_MASK_SIZE, FROST_MASK_SEEDS[index])
    # crystalline look: sharpen the bright ridges
    crystals = np.clip((noise - 0.25) / 0.75, 0.0, 1.0) ** 1.5
    mask = crystals.astype(np.float32)
    mask.setflags(write=False)
    return mask


def frost_overlay(index: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Crop a ``height`` x ``width`` window of mask ``index`` at a random offset,
    tiling the mask when the image is larger than it."""
    mask = frost_mask(index)
    reps_y = -(-height // FROST_MASK_SIZE) + 1
    reps_x = -(-width // FROST_MASK_SIZE) + 1
    tiled = np.tile(mask, (reps_y, reps_x))
    top = int(rng.integers(0, tiled.shape[0] - height + 1))
    left = int(rng.integers(0, tiled.shape[1] - width + 1))
    return tiled[top:top + height, left:left + width]
