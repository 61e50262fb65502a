"""Latent-code recovery for a target raster, and the corruption experiments.

The inversion loss is the mean absolute error between the target and the
generator's dense (pre-mask) output, taken over the target's measured pixels
only, so drops in the target never pull the reconstruction toward the drop
value.
"""

import contextlib
import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.progress import BarColumn, Progress, TextColumn, TimeRemainingColumn

from .config import make_rng
from .console import console
from .constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from .errors import ConfigError, DimensionError
from .lidar import denormalize, normalize, raster_to_points
from .metrics import chamfer, depth_errors
from .models import (
    AngleTable,
    ArrayModel,
    CorruptionSpec,
    DepthErrorReport,
    InversionConfig,
    LatentCode,
    RasterMap,
    SamplerConfig,
)
from .networks import Generator
from .optim import adam_update
from .sampling import synthesize
from .tensor import DTYPE, Tensor, grad, no_grad

logger = logging.getLogger(__name__)

DenseFn = Callable[[Tensor], Tensor]

# largest float32 strictly above the drop value; keeps noisy pixels measured
_LOWEST_MEASURED = float(np.nextafter(np.float32(-1.0), np.float32(0.0)))


class InversionResult(ArrayModel):
    """Best iterate over all restarts and its per-iteration loss curve.

    ``norms`` holds the latent norm after each update of the winning restart.
    """

    latent: LatentCode
    dense: RasterMap
    composed: RasterMap
    loss: float
    losses: np.ndarray
    norms: np.ndarray
    restart: int = 0

    @property
    def best_curve(self) -> np.ndarray:
        """Running minimum of the loss curve."""
        return np.minimum.accumulate(self.losses)


class ReconstructionReport(ArrayModel):
    target: RasterMap
    corrupted: RasterMap
    result: InversionResult
    depth: DepthErrorReport
    chamfer: Optional[float] = None


def project_to_sphere(z: np.ndarray) -> np.ndarray:
    """Rescale ``z`` onto the sphere of radius sqrt(d)."""
    norm = np.linalg.norm(z)
    if norm == 0:
        raise ConfigError("cannot project the zero vector onto the latent sphere")
    return z * (math.sqrt(z.size) / norm)


def measured_mask(target: RasterMap) -> np.ndarray:
    mask = target.drop_indicator().measured
    if not mask.any():
        raise ConfigError("inversion target has no measured pixels")
    return mask


def masked_l1(dense: Tensor, target: RasterMap, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean |target - dense| over the target's measured pixels."""
    mask = measured_mask(target) if mask is None else mask
    if dense.shape != target.shape:
        raise DimensionError(f"output {dense.shape} does not match target {target.shape}")
    weight = Tensor(mask.astype(DTYPE))
    residual = (dense - Tensor(target.values)).abs() * weight
    return residual.sum() * (1.0 / float(mask.sum()))


def _dense_fn(generator: Union[Generator, DenseFn]) -> DenseFn:
    if isinstance(generator, Generator):
        return lambda z: generator(z.reshape(1, z.shape[0])).dense[0]
    return generator


def _compose(
    generator: Union[Generator, DenseFn],
    z: np.ndarray,
    sampler: Optional[SamplerConfig],
    seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Dense and composed rasters for a final latent (mask in test mode)."""
    with no_grad():
        if not isinstance(generator, Generator):
            dense = np.clip(generator(Tensor(z.astype(DTYPE))).data, _LOWEST_MEASURED, 1.0)
            return dense, dense
        output = generator(z[None, :])
        if sampler is None:
            sampler = SamplerConfig(mode="test", multilevel=generator.config.variant == "dusty2")
        composed, _ = synthesize(output, sampler, make_rng(seed, "inversion-mask"))
    return output.dense.data[0], composed.data[0]


def _initial_latent(dim: int, rng: np.random.Generator, constrained: bool) -> np.ndarray:
    z = rng.standard_normal(dim)
    return project_to_sphere(z) if constrained else z


def _invert_once(
    target: RasterMap,
    dense_fn: DenseFn,
    config: InversionConfig,
    z: np.ndarray,
    rng: np.random.Generator,
    on_step: Callable[[], None],
) -> Tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    mask = measured_mask(target)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    best_z, best_loss = z.copy(), math.inf
    losses = np.empty(config.iterations)
    norms = np.empty(config.iterations)

    for i in range(config.iterations):
        z_eval = z + config.noise_std(i) * rng.standard_normal(z.size)
        if config.constrained:
            z_eval = project_to_sphere(z_eval)
        z_tensor = Tensor(z_eval.astype(DTYPE), requires_grad=True)
        loss = masked_l1(dense_fn(z_tensor), target, mask)
        (gradient,) = grad(loss, [z_tensor])

        losses[i] = loss.item()
        if losses[i] < best_loss:
            best_loss, best_z = losses[i], z_eval.copy()

        z, m, v = adam_update(
            z,
            gradient.data.astype(np.float64),
            m,
            v,
            i + 1,
            config.learning_rate,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )
        if config.constrained:
            z = project_to_sphere(z)
        norms[i] = np.linalg.norm(z)
        on_step()
    return best_z, float(best_loss), losses, norms


def invert(
    target: RasterMap,
    generator: Union[Generator, DenseFn],
    config: Optional[InversionConfig] = None,
    latent_dim: Optional[int] = None,
    initial: Optional[np.ndarray] = None,
    sampler: Optional[SamplerConfig] = None,
    show_progress: bool = False,
) -> InversionResult:
    """Optimize a latent code so the dense output matches ``target`` on measured pixels.

    Each restart draws its own start from ``[seed, restart]``; the lowest loss
    seen across all restarts and iterations wins.
    """
    config = config or InversionConfig()
    if isinstance(generator, Generator):
        latent_dim = generator.config.latent_dim
        if generator.config.height != target.height or generator.config.width != target.width:
            raise DimensionError(
                f"generator output {generator.config.height}x{generator.config.width} "
                f"does not match target {target.shape}"
            )
    if latent_dim is None:
        raise ConfigError("latent_dim is required for a plain dense function")
    measured_mask(target)
    dense_fn = _dense_fn(generator)

    best: Optional[Tuple[np.ndarray, float, np.ndarray, np.ndarray, int]] = None
    progress = Progress(
        TextColumn("[bold]invert"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TimeRemainingColumn(),
        console=console,
        disable=not show_progress,
    )
    with progress:
        task = progress.add_task("invert", total=config.iterations * config.restarts)
        for restart in range(config.restarts):
            rng = np.random.default_rng([config.seed, restart])
            if restart == 0 and initial is not None:
                z0 = np.asarray(initial, dtype=np.float64).reshape(-1)
                if z0.size != latent_dim:
                    raise DimensionError(f"initial latent has {z0.size} values, need {latent_dim}")
                z0 = project_to_sphere(z0) if config.constrained else z0.copy()
            else:
                z0 = _initial_latent(latent_dim, rng, config.constrained)

            frozen = (
                generator.params.frozen()
                if isinstance(generator, Generator)
                else contextlib.nullcontext()
            )
            with frozen:
                z, loss, losses, norms = _invert_once(
                    target, dense_fn, config, z0, rng, lambda: progress.advance(task)
                )
            logger.debug("restart %d: best masked L1 %.5f", restart, loss)
            if best is None or loss < best[1]:
                best = (z, loss, losses, norms, restart)

    assert best is not None
    z, loss, losses, norms, restart = best
    dense, composed = _compose(generator, z, sampler, config.seed)
    logger.info("inversion finished: masked L1 %.5f (restart %d)", loss, restart)
    return InversionResult(
        latent=LatentCode(values=z, constrained=config.constrained),
        dense=target.with_values(dense),
        composed=target.with_values(composed),
        loss=loss,
        losses=losses,
        norms=norms,
        restart=restart,
    )


# ----------------------------------------------------------------------
# Corruptions
# ----------------------------------------------------------------------


def kept_lines(height: int, keep: int) -> np.ndarray:
    """Row indices of ``keep`` evenly spaced lines out of ``height``."""
    if not 1 <= keep <= height:
        raise ConfigError(f"keep_lines must lie in [1, {height}], got {keep}")
    return (np.arange(keep) * height) // keep


def corruption_presets(height: int, seed: int = 0) -> List[CorruptionSpec]:
    """The three standard regimes: 90% random drop, one line in eight kept, N(0, 0.01) noise."""
    return [
        CorruptionSpec(kind="random-drop", drop_probability=0.9, seed=seed),
        CorruptionSpec(kind="keep-lines", keep_lines=max(1, height // 8), seed=seed),
        CorruptionSpec(kind="noise", noise_variance=0.01, seed=seed),
    ]


def corrupt(raster: RasterMap, spec: CorruptionSpec) -> RasterMap:
    """Apply one corruption regime; the same seed always gives the same result."""
    rng = np.random.default_rng(spec.seed)
    values = raster.values.copy()
    measured = raster.drop_indicator().measured
    drop = np.float32(raster.drop_value)

    if spec.kind == "random-drop":
        dropped = rng.random(values.shape) < spec.drop_probability
        values[measured & dropped] = drop
    elif spec.kind == "keep-lines":
        rows = np.zeros(raster.height, dtype=bool)
        rows[kept_lines(raster.height, spec.keep_lines)] = True
        values[~rows] = drop
    else:
        noise = rng.normal(0.0, math.sqrt(spec.noise_variance), values.shape)
        if spec.noise_space == "metric":
            spec_range = raster.normalization
            metric = denormalize(values, spec_range) + noise
            metric = np.clip(metric, spec_range.x_min_m, spec_range.x_max_m)
            noisy = normalize(metric, spec_range)
        else:
            noisy = values.astype(np.float64) + noise
        noisy = np.clip(noisy, _LOWEST_MEASURED, 1.0).astype(DTYPE)
        values = np.where(measured, noisy, values)
    return raster.with_values(values)


def reconstruct_corrupted(
    target: RasterMap,
    spec: Optional[CorruptionSpec],
    generator: Generator,
    config: Optional[InversionConfig] = None,
    table: Optional[AngleTable] = None,
    show_progress: bool = False,
) -> ReconstructionReport:
    """Corrupt, invert, and score the dense reconstruction against the clean target."""
    corrupted = corrupt(target, spec) if spec is not None else target
    result = invert(corrupted, generator, config, show_progress=show_progress)
    depth = depth_errors(result.dense, target)
    distance = None
    if table is not None:
        restricted = np.where(
            target.drop_indicator().measured, result.dense.values, np.float32(target.drop_value)
        )
        target_cloud = raster_to_points(target, table)
        recon_cloud = raster_to_points(target.with_values(restricted), table)
        if len(target_cloud) and len(recon_cloud):
            distance = chamfer(target_cloud, recon_cloud)
    return ReconstructionReport(
        target=target, corrupted=corrupted, result=result, depth=depth, chamfer=distance
    )


def nearest_neighbor_baseline(
    corrupted: RasterMap, training: Sequence[RasterMap]
) -> Tuple[int, RasterMap]:
    """Training raster closest to ``corrupted`` in masked L1 over its measured pixels."""
    if not training:
        raise ConfigError("nearest-neighbour baseline needs training rasters")
    mask = measured_mask(corrupted)
    stack = np.stack([raster.values for raster in training]).astype(np.float64)
    if stack.shape[1:] != corrupted.shape:
        raise DimensionError(f"training rasters {stack.shape[1:]} vs target {corrupted.shape}")
    errors = np.abs(stack - corrupted.values.astype(np.float64))[:, mask].mean(axis=1)
    index = int(np.argmin(errors))
    return index, training[index]


def invert_batch(
    targets: Sequence[RasterMap],
    generator: Generator,
    config: Optional[InversionConfig] = None,
) -> List[InversionResult]:
    """Invert independent targets one after another with the same settings."""
    return [invert(target, generator, config) for target in targets]
