"""Convolutions on cylindrical rasters.

Rasters wrap horizontally (azimuth) but not vertically (elevation), so every
convolution pads the width circularly and the height with zeros. Three
"valid" kernels form a closed set under differentiation:

    conv_valid(x, w)            forward correlation
    conv_transpose_valid(y, w)  adjoint in x
    conv_weight_valid(x, y)     adjoint in w

and ``CircularPad`` / ``CircularFold`` are adjoint to each other. Backward
passes are written in terms of these same functions, so second derivatives
come for free.
"""

from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import DTYPE, Function, Tensor, as_tensor, gather

Pair = Union[int, Tuple[int, int]]


def _pair(value: Pair) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _windows(
    x: np.ndarray, kernel: Tuple[int, int], stride: Tuple[int, int], out_hw: Tuple[int, int]
) -> np.ndarray:
    kh, kw = kernel
    sh, sw = stride
    view = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return view[:, :, : out_hw[0], : out_hw[1]]


def _valid_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


class ConvValid(Function):
    """Unpadded strided cross-correlation: [N,C,H,W] x [K,C,kh,kw] -> [N,K,Ho,Wo]."""

    def forward(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        stride = self.params["stride"]
        kh, kw = w.shape[2:]
        out_hw = (_valid_size(x.shape[2], kh, stride[0]), _valid_size(x.shape[3], kw, stride[1]))
        win = _windows(x, (kh, kw), stride, out_hw)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        x, w = self.inputs
        stride = self.params["stride"]
        gx = gw = None
        if self.needs_input_grad[0]:
            gx = ConvTransposeValid.apply(grad, w, stride=stride, out_hw=x.shape[2:])
        if self.needs_input_grad[1]:
            gw = ConvWeightValid.apply(x, grad, stride=stride, kernel=w.shape[2:])
        return gx, gw


class ConvTransposeValid(Function):
    """Adjoint of ConvValid in its input: [N,K,Ho,Wo] x [K,C,kh,kw] -> [N,C,H,W]."""

    def forward(self, y: np.ndarray, w: np.ndarray) -> np.ndarray:
        sh, sw = self.params["stride"]
        height, width = self.params["out_hw"]
        n, _, ho, wo = y.shape
        kh, kw = w.shape[2:]
        out = np.zeros((n, w.shape[1], height, width), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(y, w[:, :, i, j], axes=([1], [0]))
                out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        return out

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        y, w = self.inputs
        stride = self.params["stride"]
        gy = gw = None
        if self.needs_input_grad[0]:
            gy = ConvValid.apply(grad, w, stride=stride)
        if self.needs_input_grad[1]:
            gw = ConvWeightValid.apply(grad, y, stride=stride, kernel=w.shape[2:])
        return gy, gw


class ConvWeightValid(Function):
    """Adjoint of ConvValid in its kernel: [N,C,H,W] x [N,K,Ho,Wo] -> [K,C,kh,kw]."""

    def forward(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        stride = self.params["stride"]
        kernel = tuple(self.params["kernel"])
        win = _windows(x, kernel, stride, y.shape[2:])
        return np.tensordot(y, win, axes=([0, 2, 3], [0, 2, 3]))

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        x, y = self.inputs
        stride = self.params["stride"]
        gx = gy = None
        if self.needs_input_grad[0]:
            gx = ConvTransposeValid.apply(y, grad, stride=stride, out_hw=x.shape[2:])
        if self.needs_input_grad[1]:
            gy = ConvValid.apply(x, grad, stride=stride)
        return gx, gy


class CircularPad(Function):
    """Zero-pad the height by ``pad_v`` and wrap-pad the width by ``pad_h``."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        pad_v, pad_h = self.params["pad_v"], self.params["pad_h"]
        if pad_h > x.shape[3]:
            raise DimensionError(f"circular pad {pad_h} exceeds width {x.shape[3]}")
        out = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad_h, pad_h)), mode="wrap")
        return np.pad(out, ((0, 0), (0, 0), (pad_v, pad_v), (0, 0)), mode="constant")

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (CircularFold.apply(grad, pad_v=self.params["pad_v"], pad_h=self.params["pad_h"]),)


class CircularFold(Function):
    """Adjoint of CircularPad: crop the rows, add wrapped columns back."""

    def forward(self, g: np.ndarray) -> np.ndarray:
        pad_v, pad_h = self.params["pad_v"], self.params["pad_h"]
        height = g.shape[2] - 2 * pad_v
        width = g.shape[3] - 2 * pad_h
        rows = g[:, :, pad_v : pad_v + height]
        out = rows[..., pad_h : pad_h + width].copy()
        if pad_h:
            out[..., width - pad_h :] += rows[..., :pad_h]
            out[..., :pad_h] += rows[..., pad_h + width :]
        return out

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        return (CircularPad.apply(grad, pad_v=self.params["pad_v"], pad_h=self.params["pad_h"]),)


def circular_pad(x: Tensor, pad_v: int, pad_h: int) -> Tensor:
    if pad_v == 0 and pad_h == 0:
        return x
    return CircularPad.apply(x, pad_v=pad_v, pad_h=pad_h)


def circular_fold(x: Tensor, pad_v: int, pad_h: int) -> Tensor:
    if pad_v == 0 and pad_h == 0:
        return x
    return CircularFold.apply(x, pad_v=pad_v, pad_h=pad_h)


def _check_conv_shapes(x: Tensor, kernel: Tensor, channel_axis: int) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[channel_axis]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[channel_axis]}"
        )


def conv2d_circular(
    x: Tensor,
    kernel: Tensor,
    stride: Pair = 1,
    pad_v: int = 0,
    pad_h: Optional[int] = None,
) -> Tensor:
    """Convolution with circular horizontal and zero vertical padding.

    ``kernel`` is [K, C, kh, kw]. ``pad_h`` defaults to (kw - 1) // 2.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_shapes(x, kernel, channel_axis=1)
    if pad_h is None:
        pad_h = (kernel.shape[3] - 1) // 2
    padded = circular_pad(x, pad_v, pad_h)
    if padded.shape[2] < kernel.shape[2] or padded.shape[3] < kernel.shape[3]:
        raise DimensionError(
            f"kernel {kernel.shape[2:]} larger than padded input {padded.shape[2:]}"
        )
    return ConvValid.apply(padded, kernel, stride=_pair(stride))


def conv2d_transposed_circular(
    x: Tensor,
    kernel: Tensor,
    stride: Pair = 1,
    pad_v: int = 0,
    pad_h: int = 0,
) -> Tensor:
    """Adjoint of ``conv2d_circular`` in its input; upsamples by ``stride``.

    ``kernel`` is [C_in, C_out, kh, kw]. Output height is
    (H - 1) * sh + kh - 2 * pad_v, and likewise for the width.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_shapes(x, kernel, channel_axis=0)
    sh, sw = _pair(stride)
    kh, kw = kernel.shape[2:]
    out_hw = ((x.shape[2] - 1) * sh + kh, (x.shape[3] - 1) * sw + kw)
    if out_hw[0] <= 2 * pad_v or out_hw[1] <= 2 * pad_h:
        raise DimensionError(f"padding ({pad_v}, {pad_h}) removes the whole output {out_hw}")
    full = ConvTransposeValid.apply(x, kernel, stride=(sh, sw), out_hw=out_hw)
    return circular_fold(full, pad_v, pad_h)


def blur_kernel() -> np.ndarray:
    """Fixed [2, 1, 3, 3] kernel: vertical 3x1 and horizontal 1x3 box averages."""
    kernel = np.zeros((2, 1, 3, 3), dtype=DTYPE)
    kernel[0, 0, :, 1] = 1.0 / 3.0
    kernel[1, 0, 1, :] = 1.0 / 3.0
    return kernel


def _blur_padding_index(shape: Tuple[int, int, int, int]) -> np.ndarray:
    """Flat indices padding one row (edge-replicated) and one column (wrapped)."""
    n, c, height, width = shape
    rows = np.clip(np.arange(-1, height + 1), 0, height - 1)
    cols = np.arange(-1, width + 1) % width
    plane = rows[:, None] * width + cols[None, :]
    base = (np.arange(n * c) * height * width).reshape(n, c, 1, 1)
    return base + plane[None, None]


def blur_filter(x: Tensor) -> Tensor:
    """Map a single-channel raster batch to 2 channels (vertical, horizontal blur).

    The top and bottom rows are edge-replicated so averaging preserves
    constants; the left and right seams wrap.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"blur_filter expects [N, 1, H, W], got {x.shape}")
    padded = gather(x, _blur_padding_index(x.shape))
    return ConvValid.apply(padded, Tensor(blur_kernel()), stride=(1, 1))
