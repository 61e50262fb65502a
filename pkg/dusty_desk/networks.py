"""Generator and discriminator for cylindrical inverse-depth rasters.

Both networks are plain stacks of circular convolutions with leaky ReLU and
no normalization layers. Weights are stored as N(0, 1) draws and scaled by
the He constant on every forward pass (equalized learning rate); biases start
at zero and are not scaled.
"""

import math
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .constants import LEAKY_RELU_SLOPE
from .conv import blur_filter, conv2d_circular, conv2d_transposed_circular
from .errors import ConfigError, DimensionError
from .models import ArrayModel, LatentCode, NetworkConfig
from .optim import ParamSet, equalized_scale
from .tensor import DTYPE, Tensor, as_tensor

# largest float32 strictly below 1; keeps tanh outputs inside the open interval
DENSE_LIMIT = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


class LayerSpec(NamedTuple):
    name: str
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    pad: Tuple[int, int]
    transposed: bool
    activate: bool

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        if self.transposed:
            return (self.in_channels, self.out_channels) + self.kernel
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def fan_in(self) -> int:
        kh, kw = self.kernel
        if self.transposed:
            sh, sw = self.stride
            return self.in_channels * math.ceil(kh / sh) * math.ceil(kw / sw)
        return self.in_channels * kh * kw


def _channel_ladder(config: NetworkConfig) -> List[int]:
    base = config.base_channels
    return [8 * base, 4 * base, 2 * base, base]


def generator_layers(config: NetworkConfig) -> List[LayerSpec]:
    """1x1 latent -> H/16 x W/16 -> H/8 -> H/4 -> H/2 -> H x W."""
    head = (config.height // 16, config.width // 16)
    ladder = _channel_ladder(config)
    layers = [
        LayerSpec("g0", config.latent_dim, ladder[0], head, head, (0, 0), True, True)
    ]
    for index in range(1, 4):
        layers.append(
            LayerSpec(
                f"g{index}", ladder[index - 1], ladder[index], (4, 4), (2, 2), (1, 1), True, True
            )
        )
    layers.append(
        LayerSpec("g4", ladder[3], config.out_channels, (4, 4), (2, 2), (1, 1), True, False)
    )
    return layers


def discriminator_layers(config: NetworkConfig) -> List[LayerSpec]:
    """2-channel blur -> four stride-2 convs -> H/16 x W/16 conv to one logit."""
    ladder = list(reversed(_channel_ladder(config)))
    layers = []
    in_channels = 2
    for index, out_channels in enumerate(ladder):
        layers.append(
            LayerSpec(
                f"d{index}", in_channels, out_channels, (4, 4), (2, 2), (1, 1), False, True
            )
        )
        in_channels = out_channels
    tail = (config.height // 16, config.width // 16)
    layers.append(LayerSpec("d4", in_channels, 1, tail, (1, 1), (0, 0), False, False))
    return layers


def init_params(role: str, layers: List[LayerSpec], rng: np.random.Generator) -> ParamSet:
    params = ParamSet(role)
    for layer in layers:
        weight = rng.standard_normal(layer.weight_shape).astype(DTYPE)
        params.add(f"{layer.name}.weight", Tensor(weight))
        params.add(f"{layer.name}.bias", Tensor(np.zeros(layer.out_channels, dtype=DTYPE)))
    return params


def _check_params(params: ParamSet, layers: List[LayerSpec]) -> None:
    for layer in layers:
        name = f"{layer.name}.weight"
        if name not in params:
            raise ConfigError(f"{params.role} parameters lack '{name}'")
        if params[name].shape != layer.weight_shape:
            raise DimensionError(
                f"{name}: expected {layer.weight_shape}, got {params[name].shape}"
            )


def _apply_layer(x: Tensor, layer: LayerSpec, params: ParamSet) -> Tensor:
    weight = equalized_scale(params[f"{layer.name}.weight"], layer.fan_in)
    bias = params[f"{layer.name}.bias"].reshape(1, layer.out_channels, 1, 1)
    if layer.transposed:
        out = conv2d_transposed_circular(x, weight, layer.stride, layer.pad[0], layer.pad[1])
    else:
        out = conv2d_circular(x, weight, layer.stride, layer.pad[0], layer.pad[1])
    out = out + bias
    if layer.activate:
        out = out.leaky_relu(LEAKY_RELU_SLOPE)
    return out


class GeneratorOutput(ArrayModel):
    """Dense inverse depth plus raw measurability logits (None for the baseline)."""

    dense: Tensor
    pixel_logits: Optional[Tensor] = None
    image_logits: Optional[Tensor] = None

    @property
    def measurability(self) -> Optional[np.ndarray]:
        """pi = sigmoid(e) of the pixel branch."""
        if self.pixel_logits is None:
            return None
        return 0.5 * (1.0 + np.tanh(0.5 * self.pixel_logits.data.astype(np.float64)))


class Generator:
    """Decoder from latent codes to ``variant``-dependent output channels."""

    def __init__(
        self,
        config: NetworkConfig,
        params: Optional[ParamSet] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        self.config = config
        self.layers = generator_layers(config)
        if params is None:
            params = init_params("generator", self.layers, rng or np.random.default_rng(0))
        _check_params(params, self.layers)
        self.params = params

    def _latent_batch(self, z: Union[Tensor, np.ndarray, LatentCode]) -> Tensor:
        if isinstance(z, LatentCode):
            z = z.values[None, :]
        z = as_tensor(z)
        if z.ndim == 1:
            z = z.reshape(1, z.shape[0])
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise DimensionError(
                f"latent batch must be [N, {self.config.latent_dim}], got {z.shape}"
            )
        return z.reshape(z.shape[0], z.shape[1], 1, 1)

    def __call__(self, z: Union[Tensor, np.ndarray, LatentCode]) -> GeneratorOutput:
        x = self._latent_batch(z)
        for layer in self.layers:
            x = _apply_layer(x, layer, self.params)

        dense = x[:, 0].tanh().clamp(-DENSE_LIMIT, DENSE_LIMIT)
        if self.config.variant == "baseline":
            return GeneratorOutput(dense=dense)
        pixel = x[:, 1]
        image = x[:, 2] if self.config.variant == "dusty2" else None
        return GeneratorOutput(dense=dense, pixel_logits=pixel, image_logits=image)


class Discriminator:
    """Realness logit per raster; every layer wraps horizontally."""

    def __init__(
        self,
        config: NetworkConfig,
        params: Optional[ParamSet] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        self.config = config
        self.layers = discriminator_layers(config)
        if params is None:
            params = init_params("discriminator", self.layers, rng or np.random.default_rng(1))
        _check_params(params, self.layers)
        self.params = params

    def __call__(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        expected = (1, self.config.height, self.config.width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"discriminator expects [N, {expected}], got {x.shape}")
        out = blur_filter(x)
        for layer in self.layers:
            out = _apply_layer(out, layer, self.params)
        return out.reshape(x.shape[0], 1)


def generate(
    z: Union[Tensor, np.ndarray, LatentCode], params: ParamSet, config: NetworkConfig
) -> GeneratorOutput:
    """Run the generator defined by ``config`` with ``params``."""
    return Generator(config, params)(z)


def discriminate(x: Union[Tensor, np.ndarray], params: ParamSet, config: NetworkConfig) -> Tensor:
    """N x 1 realness logits."""
    return Discriminator(config, params)(x)
