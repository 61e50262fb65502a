"""Straight-through Gumbel-Sigmoid drop masks and the masking compositor."""

from typing import Optional, Tuple, Union

import numpy as np

from .constants import DROP_VALUE, LOGIT_CLAMP
from .errors import ConfigError, DimensionError
from .models import ArrayModel, SamplerConfig
from .networks import GeneratorOutput
from .tensor import DTYPE, Tensor, as_tensor

GumbelPair = Tuple[np.ndarray, np.ndarray]


class DropMask(ArrayModel):
    """Binary mask with straight-through gradients.

    ``mask`` carries the hard values forward and the soft mask's gradient
    backward. ``pixel_noise`` / ``image_noise`` record the (g1, g2) draws.
    """

    mask: Tensor
    soft: Tensor
    hard: np.ndarray
    pixel_noise: Optional[Tuple[np.ndarray, np.ndarray]] = None
    image_noise: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def keep_rate(self) -> float:
        return float(self.hard.mean()) if self.hard.size else 0.0

    @property
    def drop_rate(self) -> float:
        return 1.0 - self.keep_rate


def gumbel_noise(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Standard Gumbel draws, -log(-log(U))."""
    uniform = np.clip(rng.random(shape), np.finfo(np.float64).tiny, None)
    return -np.log(-np.log(uniform))


def _draw_pair(
    rng: Optional[np.random.Generator], shape: Tuple[int, ...], noise: Optional[GumbelPair]
) -> GumbelPair:
    if noise is not None:
        g1, g2 = (np.asarray(n, dtype=np.float64) for n in noise)
        if g1.shape != shape or g2.shape != shape:
            raise DimensionError(f"noise shapes {g1.shape}/{g2.shape} do not match {shape}")
        return g1, g2
    if rng is None:
        raise ConfigError("a random generator is needed when no noise is given")
    return gumbel_noise(rng, shape), gumbel_noise(rng, shape)


def _zero_pair(shape: Tuple[int, ...]) -> GumbelPair:
    return np.zeros(shape), np.zeros(shape)


def relaxed_mask(logits: Tensor, noise: GumbelPair, temperature: float) -> Tensor:
    """sigmoid((clamp(e) + g1 - g2) / tau)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    g1, g2 = noise
    offset = Tensor((g1 - g2).astype(DTYPE))
    return ((logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) + offset) * (1.0 / temperature)).sigmoid()


def straight_through(soft: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Hard threshold at 0.5 forward, identity gradient backward."""
    hard = (soft.data >= 0.5).astype(DTYPE)
    return soft + Tensor(hard - soft.data), hard


def sample_mask(
    logits: Tensor,
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[GumbelPair] = None,
) -> DropMask:
    """Pixel-independent binary mask with P(m = 1) = sigmoid(e)."""
    logits = as_tensor(logits)
    if noise is None and config.mode == "deterministic":
        noise = _zero_pair(logits.shape)
    pair = _draw_pair(rng, logits.shape, noise)
    soft = relaxed_mask(logits, pair, config.temperature)
    mask, hard = straight_through(soft)
    return DropMask(mask=mask, soft=soft, hard=hard, pixel_noise=pair)


def sample_mask_multilevel(
    pixel_logits: Tensor,
    image_logits: Optional[Tensor],
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    pixel_noise: Optional[GumbelPair] = None,
    image_noise: Optional[GumbelPair] = None,
) -> DropMask:
    """Product of a pixel-level mask and an image-level mask.

    The image branch shares one (g1, g2) draw per sample across all of its
    pixels. In ``test`` and ``deterministic`` modes that draw is zero.
    """
    if image_logits is None:
        raise ConfigError("multilevel sampling needs an image-level logit channel")
    pixel_logits, image_logits = as_tensor(pixel_logits), as_tensor(image_logits)
    if pixel_logits.shape != image_logits.shape:
        raise DimensionError(
            f"pixel logits {pixel_logits.shape} and image logits {image_logits.shape} differ"
        )

    pixel = sample_mask(pixel_logits, config, rng, pixel_noise)

    shape = image_logits.shape
    per_sample = (shape[0],) + (1,) * (len(shape) - 1) if len(shape) == 3 else (1, 1)
    if image_noise is None and config.mode != "train":
        image_noise = _zero_pair(per_sample)
    g1, g2 = _draw_pair(rng, per_sample, image_noise)
    shared = (np.broadcast_to(g1, shape), np.broadcast_to(g2, shape))
    image_soft = relaxed_mask(image_logits, shared, config.temperature)
    image_mask, image_hard = straight_through(image_soft)

    return DropMask(
        mask=pixel.mask * image_mask,
        soft=pixel.soft * image_soft,
        hard=pixel.hard * image_hard,
        pixel_noise=pixel.pixel_noise,
        image_noise=(g1, g2),
    )


def compose(dense: Tensor, mask: Union[DropMask, Tensor], drop_value: float = DROP_VALUE) -> Tensor:
    """x = m * dense + (1 - m) * drop_value."""
    dense = as_tensor(dense)
    m = mask.mask if isinstance(mask, DropMask) else as_tensor(mask)
    if m.shape != dense.shape:
        raise DimensionError(f"mask {m.shape} does not match dense map {dense.shape}")
    return m * dense + (1.0 - m) * drop_value


def synthesize(
    output: GeneratorOutput,
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Optional[DropMask]]:
    """Composed raster batch for any variant (the baseline is returned as is)."""
    if output.pixel_logits is None:
        return output.dense, None
    if config.multilevel:
        mask = sample_mask_multilevel(output.pixel_logits, output.image_logits, config, rng)
    else:
        mask = sample_mask(output.pixel_logits, config, rng)
    return compose(output.dense, mask), mask
