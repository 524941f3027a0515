"""Image helpers shared by corruptions and augmentations.

An image is a ``numpy.ndarray`` of shape ``(height, width, 3)`` and dtype uint8.
Transforms work on float32 copies scaled to [0, 1] and come back through
:func:`quantize`, which clamps and rounds half away from zero.
"""
from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .const import LUMA_WEIGHTS, MIN_IMAGE_SIDE
from .errors import DataError, MissingImageError, UsageError

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]


def check_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray):
        raise UsageError(f"image must be a numpy array, got {type(img).__name__}")
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(
            f"image must be uint8 with shape (H, W, 3), got {img.dtype} {img.shape}"
        )
    height, width = img.shape[:2]
    if height < MIN_IMAGE_SIDE or width < MIN_IMAGE_SIDE:
        raise UsageError(
            f"image is {width}x{height}, minimum is {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
        )
    return img


def to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)


def quantize(x: np.ndarray) -> np.ndarray:
    """Map a [0, 1] float image to uint8 with round-half-away-from-zero."""
    scaled = np.clip(np.asarray(x, dtype=np.float32), 0.0, 1.0) * np.float32(255.0)
    # values are nonnegative after the clip, so floor(x + 0.5) rounds away from zero
    return np.floor(scaled + np.float32(0.5)).astype(np.uint8)


def grayscale(x: np.ndarray) -> np.ndarray:
    weights = np.asarray(LUMA_WEIGHTS, dtype=np.float32)
    return (x @ weights).astype(np.float32)


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"Image file not found: {path}")
    try:
        with PILImage.open(path) as pil:
            img = np.asarray(pil.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as err:
        raise DataError(f"Cannot decode image {path}: {err}") from err
    return img


def encode_png(img: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    PILImage.fromarray(np.ascontiguousarray(check_image(img))).save(
        buffer, format="PNG", optimize=False, compress_level=6
    )
    return buffer.getvalue()


def write_png(img: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    path.write_bytes(encode_png(img))
    _LOGGER.debug("Wrote %s", path)


def jpeg_round_trip(img: np.ndarray, quality: int) -> np.ndarray:
    buffer = io.BytesIO()
    PILImage.fromarray(np.ascontiguousarray(img)).save(buffer, format="JPEG", quality=quality)
    buffer.seek(0)
    with PILImage.open(buffer) as pil:
        return np.asarray(pil.convert("RGB"), dtype=np.uint8).copy()


def resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    pil = PILImage.fromarray(np.ascontiguousarray(img))
    return np.asarray(pil.resize((width, height), PILImage.Resampling.BILINEAR), dtype=np.uint8)


def tile_grid(images: list, columns: int) -> np.ndarray:
    """Paste equally sized images into a grid sheet, row-major."""
    if not images:
        raise UsageError("cannot build a grid from zero images")
    height, width = images[0].shape[:2]
    rows = -(-len(images) // columns)
    sheet = np.full((rows * height, columns * width, 3), 255, dtype=np.uint8)
    for index, img in enumerate(images):
        row, col = divmod(index, columns)
        sheet[row * height:(row + 1) * height, col * width:(col + 1) * width] = img
    return sheet
