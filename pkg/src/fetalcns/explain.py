"""Gradient-weighted class activation maps and overlay rendering.

The heatmap weights each final-stage channel by the spatial mean of the
class logit's gradient over that channel's activations, rectifies the
weighted sum, upsamples bilinearly to the input size and min-max normalizes
to [0, 1]. A raw map that is identically zero stays all-zero rather than
being inflated to full saliency.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageops
from .errors import ConfigurationError, InputRangeError, ShapeError
from .net import NetConfig, ParameterSet, forward_with_capture, last_stage_logit_gradient


@dataclass
class Heatmap:
    """H×W saliency values in [0, 1] for one class."""

    values: np.ndarray
    source_height: int  # spatial dims of the feature map it came from
    source_width: int
    class_index: int


@dataclass
class OverlayConfig:
    alpha: float = 0.35
    colormap: str = "jet"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be within [0,1], got {self.alpha}")
        if self.colormap != "jet":
            raise ConfigurationError(f"unsupported colormap {self.colormap!r}")


def grad_cam(
    params: ParameterSet, image: np.ndarray, class_index: int, config: NetConfig
) -> Heatmap:
    """Class activation map for one eval-preprocessed 3×H×W image."""
    capture = forward_with_capture(params, image, config)
    grad = last_stage_logit_gradient(params, capture, class_index)
    alphas = grad.mean(axis=(1, 2))  # per-channel weight
    acts = capture.last_conv_activations.astype(np.float64)
    raw = np.maximum((alphas[:, None, None] * acts).sum(axis=0), 0.0)
    src_h, src_w = raw.shape
    upsampled = imageops.resize_bilinear(raw, image.shape[1], image.shape[2])
    upsampled = np.maximum(upsampled, 0.0)  # interpolation cannot create saliency < 0
    lo, hi = float(upsampled.min()), float(upsampled.max())
    if hi > lo:
        values = (upsampled - lo) / (hi - lo)
    else:
        values = np.zeros_like(upsampled)
    return Heatmap(
        values=values, source_height=src_h, source_width=src_w, class_index=class_index
    )


# Anchor table of the piecewise-linear jet map (value -> R, G, B):
#   0.00 -> (  0,   0, 255)   blue
#   0.25 -> (  0, 255, 255)   cyan
#   0.50 -> (  0, 255,   0)   green
#   0.75 -> (255, 255,   0)   yellow
#   1.00 -> (255,   0,   0)   red
_JET_X = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_JET_R = np.array([0.0, 0.0, 0.0, 255.0, 255.0])
_JET_G = np.array([0.0, 255.0, 255.0, 255.0, 0.0])
_JET_B = np.array([255.0, 255.0, 0.0, 0.0, 0.0])


def colorize(heatmap: Heatmap | np.ndarray, config: OverlayConfig | None = None) -> np.ndarray:
    """Map [0,1] saliency to H×W×3 uint8 via the documented jet anchors."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise InputRangeError(
            f"heatmap values must lie in [0,1], got [{values.min()}, {values.max()}]"
        )
    flat = values.ravel().astype(np.float64)
    rgb = np.stack(
        [
            np.interp(flat, _JET_X, _JET_R),
            np.interp(flat, _JET_X, _JET_G),
            np.interp(flat, _JET_X, _JET_B),
        ],
        axis=1,
    )
    return np.rint(rgb).astype(np.uint8).reshape(values.shape + (3,))


def overlay(original: np.ndarray, colorized: np.ndarray, alpha: float) -> np.ndarray:
    """Per-channel blend round((1-alpha)*original + alpha*colorized)."""
    orig = imageops.ensure_3channel(np.asarray(original))
    if orig.shape != colorized.shape:
        raise ShapeError(f"image {orig.shape} and heatmap {colorized.shape} differ")
    if not 0.0 <= alpha <= 1.0:
        raise InputRangeError(f"alpha must be within [0,1], got {alpha}")
    blended = (1.0 - alpha) * orig.astype(np.float64) + alpha * colorized.astype(np.float64)
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def write_triptych(
    out_dir: str | Path,
    sample_id: str,
    original: np.ndarray,
    heatmap: Heatmap,
    config: OverlayConfig,
) -> dict[str, Path]:
    """Write `<sample_id>.{orig,cam,overlay}.png` and return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    colorized = colorize(heatmap, config)
    blended = overlay(original, colorized, config.alpha)
    paths = {
        "orig": out_dir / f"{sample_id}.orig.png",
        "cam": out_dir / f"{sample_id}.cam.png",
        "overlay": out_dir / f"{sample_id}.overlay.png",
    }
    imageops.save_image(paths["orig"], imageops.ensure_3channel(np.asarray(original)))
    imageops.save_image(paths["cam"], colorized)
    imageops.save_image(paths["overlay"], blended)
    return paths
