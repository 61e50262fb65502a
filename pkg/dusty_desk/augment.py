"""Differentiable augmentations applied to every discriminator input."""

from typing import Optional, Tuple

import numpy as np

from .constants import (
    BRIGHTNESS_RANGE,
    CONTRAST_RANGE,
    CUTOUT_RATIO,
    DROP_VALUE,
    TRANSLATION_RATIO,
)
from .errors import DimensionError
from .models import ArrayModel, AugmentConfig
from .tensor import DTYPE, Tensor, as_tensor, gather


class AugmentDraw(ArrayModel):
    """Per-sample random parameters of one augmentation pass (None = toggle off)."""

    brightness: Optional[np.ndarray] = None
    contrast: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    cutout: Optional[np.ndarray] = None


def _as_batch(batch: Tensor) -> Tensor:
    batch = as_tensor(batch)
    if batch.ndim == 3:
        batch = batch.reshape(batch.shape[0], 1, batch.shape[1], batch.shape[2])
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise DimensionError(f"augmentations expect [N, 1, H, W], got {batch.shape}")
    return batch


def draw_augment(
    shape: Tuple[int, ...], config: AugmentConfig, rng: np.random.Generator
) -> AugmentDraw:
    """Fresh randomness for every sample of a batch of ``shape``."""
    n, height, width = shape[0], shape[-2], shape[-1]
    draw = AugmentDraw()
    if config.color:
        draw.brightness = rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE, n)
        draw.contrast = rng.uniform(CONTRAST_RANGE[0], CONTRAST_RANGE[1], n)
    if config.translation:
        max_y = int(height * TRANSLATION_RATIO)
        max_x = int(width * TRANSLATION_RATIO)
        draw.shift = np.stack(
            (rng.integers(-max_y, max_y + 1, n), rng.integers(-max_x, max_x + 1, n)), axis=1
        )
    if config.cutout:
        size_y, size_x = int(height * CUTOUT_RATIO), int(width * CUTOUT_RATIO)
        draw.cutout = np.stack(
            (
                rng.integers(0, height + (1 - size_y % 2), n),
                rng.integers(0, width + (1 - size_x % 2), n),
            ),
            axis=1,
        )
    return draw


def adjust_color(batch: Tensor, brightness: np.ndarray, contrast: np.ndarray) -> Tensor:
    """Additive brightness, then contrast around each sample's mean, clamped to [-1, 1]."""
    n = batch.shape[0]
    out = batch + Tensor(np.asarray(brightness, dtype=DTYPE).reshape(n, 1, 1, 1))
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    out = (out - mean) * Tensor(np.asarray(contrast, dtype=DTYPE).reshape(n, 1, 1, 1)) + mean
    return out.clamp(-1.0, 1.0)


def _translation_index(shape: Tuple[int, ...], shift: np.ndarray) -> np.ndarray:
    n, c, height, width = shape
    rows = np.arange(height)[None, :] - shift[:, 0:1]
    cols = (np.arange(width)[None, :] - shift[:, 1:2]) % width
    valid = (rows >= 0) & (rows < height)
    plane = rows[:, :, None] * width + cols[:, None, :]
    base = (np.arange(n) * c * height * width).reshape(n, 1, 1)
    index = np.where(valid[:, :, None], base + plane, -1)
    return index.reshape(n, 1, height, width)


def translate(batch: Tensor, shift: np.ndarray, drop_value: float = DROP_VALUE) -> Tensor:
    """Shift each sample by (dy, dx): circular in x, filled with ``drop_value`` in y."""
    shift = np.asarray(shift, dtype=np.int64).reshape(batch.shape[0], 2)
    index = _translation_index(batch.shape, shift)
    fill = np.where(index < 0, DTYPE(drop_value), DTYPE(0.0))
    return gather(batch, index) + Tensor(fill)


def cut_out(batch: Tensor, centers: np.ndarray, drop_value: float = DROP_VALUE) -> Tensor:
    """Set one (H/2 x W/2) rectangle per sample, centred at ``centers``, to ``drop_value``."""
    n, _, height, width = batch.shape
    size_y, size_x = int(height * CUTOUT_RATIO), int(width * CUTOUT_RATIO)
    centers = np.asarray(centers, dtype=np.int64).reshape(n, 2)
    rows = np.arange(height)[None, :]
    cols = np.arange(width)[None, :]
    top = centers[:, 0:1] - size_y // 2
    left = centers[:, 1:2] - size_x // 2
    inside_y = (rows >= top) & (rows < top + size_y)
    inside_x = (cols >= left) & (cols < left + size_x)
    cut = (inside_y[:, :, None] & inside_x[:, None, :])[:, None]
    keep = (~cut).astype(DTYPE)
    return batch * Tensor(keep) + Tensor((1.0 - keep) * DTYPE(drop_value))


def apply_augment(batch: Tensor, draw: AugmentDraw, drop_value: float = DROP_VALUE) -> Tensor:
    """Color, then translation, then cutout, using pre-drawn parameters."""
    out = _as_batch(batch)
    if draw.brightness is not None and draw.contrast is not None:
        out = adjust_color(out, draw.brightness, draw.contrast)
    if draw.shift is not None:
        out = translate(out, draw.shift, drop_value)
    if draw.cutout is not None:
        out = cut_out(out, draw.cutout, drop_value)
    return out


def diff_augment(
    batch: Tensor,
    config: AugmentConfig,
    rng: np.random.Generator,
    drop_value: float = DROP_VALUE,
) -> Tensor:
    """Augment a raster batch with fresh per-sample randomness."""
    out = _as_batch(batch)
    if not config.enabled:
        return out
    return apply_augment(out, draw_augment(out.shape, config, rng), drop_value)
