"""Bilinear resampling shared by mask downscaling and score-map upsampling."""

from __future__ import annotations

import numpy as np

from dmad.errors import ValidationError


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D array with bilinear interpolation, pixel-center convention.

    Sample points follow the align-corners=false mapping used by common
    deep-learning resize ops: output center (i, j) reads source coordinate
    ((i + 0.5) * h / out_h - 0.5, (j + 0.5) * w / out_w - 0.5), clamped to
    the valid range. Interpolation uses the lerp form a + t * (b - a) so
    constant inputs are preserved bit-exactly.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValidationError(f"target dims must be positive, got {out_h}x{out_w}")
    if src.ndim != 2:
        raise ValidationError(f"expected 2-D input, got shape {src.shape}")

    h, w = src.shape
    src = np.asarray(src, dtype=np.float64)

    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    top = src[np.ix_(y0, x0)]
    top = top + fx * (src[np.ix_(y0, x1)] - top)
    bot = src[np.ix_(y1, x0)]
    bot = bot + fx * (src[np.ix_(y1, x1)] - bot)
    return top + fy * (bot - top)
