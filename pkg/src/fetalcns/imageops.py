"""Low-level image array helpers shared by preprocessing and explanation.

Pixel arrays are numpy arrays in H×W (grayscale) or H×W×3 (color) layout
with values on the 0-255 scale (uint8 or float). All geometric operations
here are deterministic; the bilinear resampler is specified exactly so that
outputs are reproducible bit-for-bit for a given input.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputRangeError, ShapeError


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize H×W or H×W×C pixel data with bilinear interpolation.

    Sampling convention: output pixel (i, j) reads the source at
    ``((i + 0.5) * H_in / H_out - 0.5, (j + 0.5) * W_in / W_out - 0.5)``
    (half-pixel centers, no corner alignment), with coordinates clamped to
    the source bounds and no antialiasing prefilter. Returns float64 on the
    same 0-255 scale as the input.
    """
    if image.ndim not in (2, 3):
        raise ShapeError(f"expected 2D or 3D pixel array, got shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise InputRangeError(f"target size {out_h}x{out_w} must be >= 1")
    src = np.asarray(image, dtype=np.float64)
    in_h, in_w = src.shape[:2]

    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if src.ndim == 3:
        wy = wy[:, :, None]
        wx = wx[:, :, None]

    top = src[y0][:, x0] * (1.0 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1.0 - wx) + src[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def resize_short_side(image: np.ndarray, short: int) -> np.ndarray:
    """Resize so the shorter spatial side equals ``short``, keeping aspect.

    The longer side is rounded half-up to the nearest pixel.
    """
    h, w = image.shape[:2]
    if h <= 0 or w <= 0:
        raise ShapeError(f"degenerate image of shape {image.shape}")
    if h <= w:
        new_h = short
        new_w = int(np.floor(w * short / h + 0.5))
    else:
        new_w = short
        new_h = int(np.floor(h * short / w + 0.5))
    if (new_h, new_w) == (h, w):  # already at target geometry
        return np.asarray(image, dtype=np.float64)
    return resize_bilinear(image, new_h, new_w)


def crop(image: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """Crop a window; raises if the window exceeds the image bounds."""
    h, w = image.shape[:2]
    if top < 0 or left < 0 or height < 1 or width < 1:
        raise InputRangeError(f"invalid crop window ({top},{left},{height},{width})")
    if top + height > h or left + width > w:
        raise InputRangeError(
            f"crop window ({top},{left},{height},{width}) exceeds image {h}x{w}"
        )
    return image[top : top + height, left : left + width].copy()


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Center crop to size×size, offsets floored when the margin is odd."""
    h, w = image.shape[:2]
    if h < size or w < size:
        raise InputRangeError(f"image {h}x{w} smaller than center crop {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return crop(image, top, left, size, size)


def ensure_3channel(image: np.ndarray) -> np.ndarray:
    """Replicate grayscale data to 3 channels; pass 3-channel data through."""
    if image.ndim == 2:
        return np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim == 3 and image.shape[2] == 3:
        return image
    raise ShapeError(f"expected H×W or H×W×3 pixel array, got shape {image.shape}")


def load_image(path: str | Path) -> np.ndarray:
    """Load an image file as a uint8 array (H×W for grayscale, H×W×3 otherwise)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            return np.asarray(im.convert("L"), dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a uint8 H×W or H×W×3 array as PNG (format from the extension)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
