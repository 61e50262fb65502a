"""Tests for the differentiable augmentations."""

import numpy as np
import pytest

from dusty_desk.augment import adjust_color, cut_out, diff_augment, draw_augment, translate
from dusty_desk.errors import DimensionError
from dusty_desk.models import AugmentConfig
from dusty_desk.tensor import DTYPE, Tensor, grad


def _ramp(n=1, height=4, width=8):
    values = np.tile(np.linspace(-0.8, 0.8, width), (n, 1, height, 1)).astype(DTYPE)
    values += np.arange(height, dtype=DTYPE).reshape(1, 1, height, 1) * 0.01
    return Tensor(values)


def test_translate_wraps_columns():
    """A horizontal shift rolls the raster around the seam."""
    x = _ramp()
    out = translate(x, np.array([[0, 3]]))
    np.testing.assert_array_equal(out.data, np.roll(x.data, 3, axis=3))


def test_translate_fills_rows_with_drop_value():
    """A vertical shift brings in rows of drops."""
    x = _ramp()
    out = translate(x, np.array([[1, 0]])).data
    np.testing.assert_array_equal(out[0, 0, 0], np.full(8, -1.0))
    np.testing.assert_array_equal(out[0, 0, 1:], x.data[0, 0, :-1])


def test_translate_is_differentiable():
    """Gradient of a sum through a shift counts surviving pixels."""
    x = Tensor(_ramp().data, requires_grad=True)
    (g,) = grad(translate(x, np.array([[-1, 2]])).sum(), [x])
    np.testing.assert_array_equal(g.data[0, 0, 0], np.zeros(8))
    np.testing.assert_array_equal(g.data[0, 0, 1:], np.ones((3, 8)))


def test_cut_out_rectangle():
    """Cutout drops an H/2 x W/2 block around the centre."""
    x = Tensor(np.zeros((1, 1, 4, 8), dtype=DTYPE))
    out = cut_out(x, np.array([[2, 4]])).data[0, 0]
    assert np.count_nonzero(out == -1.0) == 2 * 4
    np.testing.assert_array_equal(out[1:3, 2:6], np.full((2, 4), -1.0))


def test_neutral_color_is_identity():
    """Zero brightness and unit contrast leave rasters unchanged."""
    x = _ramp(n=2)
    out = adjust_color(x, np.zeros(2), np.ones(2))
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_color_output_is_clamped():
    """Color jitter never leaves [-1, 1]."""
    x = _ramp(n=2)
    out = adjust_color(x, np.array([0.3, -0.3]), np.array([1.5, 1.5]))
    assert out.data.min() >= -1.0
    assert out.data.max() <= 1.0


def test_draw_ranges():
    """Drawn parameters stay inside the configured ranges."""
    draw = draw_augment((50, 1, 16, 64), AugmentConfig(), np.random.default_rng(0))
    assert np.all(np.abs(draw.brightness) <= 0.3)
    assert np.all((draw.contrast >= 0.5) & (draw.contrast <= 1.5))
    assert np.all(np.abs(draw.shift[:, 0]) <= 2)
    assert np.all(np.abs(draw.shift[:, 1]) <= 8)
    assert draw.cutout.shape == (50, 2)


def test_disabled_augment_only_reshapes():
    """With every toggle off the batch passes through unchanged."""
    x = Tensor(np.zeros((2, 4, 8), dtype=DTYPE))
    config = AugmentConfig(color=False, translation=False, cutout=False)
    out = diff_augment(x, config, np.random.default_rng(0))
    assert out.shape == (2, 1, 4, 8)


def test_augment_rejects_multichannel_batches():
    """Only single-channel raster batches are augmented."""
    with pytest.raises(DimensionError):
        diff_augment(
            Tensor(np.zeros((1, 2, 4, 8), dtype=DTYPE)), AugmentConfig(), np.random.default_rng(0)
        )
