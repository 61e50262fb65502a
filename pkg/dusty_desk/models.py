"""Data models for rasters, point clouds, configurations and reports."""

import math
from typing import Any, ClassVar, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .constants import (
    DEFAULT_BASE_CHANNELS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EMA_DECAY,
    DEFAULT_EVAL_CLOUDS,
    DEFAULT_EVAL_POINTS,
    DEFAULT_EVAL_REPEATS,
    DEFAULT_HEIGHT,
    DEFAULT_LATENT_DIM,
    DEFAULT_LEARNING_RATE,
    DEFAULT_R1_GAMMA,
    DEFAULT_TEMPERATURE,
    DEFAULT_WIDTH,
    DROP_VALUE,
    INVERSION_ITERATIONS,
    INVERSION_LEARNING_RATE,
    INVERSION_NOISE_SCALE,
    JSD_BINS,
    JSD_BOUND_M,
    MAX_DISTANCE_M,
    MIN_DISTANCE_M,
    SCORE_WEIGHTS,
    SWD_LEVELS,
    SWD_PATCH_SIZE,
    SWD_PATCHES_PER_IMAGE,
    SWD_PROJECTIONS,
    SWD_REPEATS,
    TOLERANCE_BOUNDS,
    TOLERANCE_POINTS,
    TOLERANCE_TRIALS,
    VARIANT_CHANNELS,
)

Variant = Literal["baseline", "dusty1", "dusty2"]
SamplerMode = Literal["train", "test", "deterministic"]
CorruptionKind = Literal["random-drop", "keep-lines", "noise"]


class ArrayModel(BaseModel):
    """Base for models that carry numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


class ConfigModel(BaseModel):
    """Base for configuration models; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


# ----------------------------------------------------------------------
# LiDAR data
# ----------------------------------------------------------------------


class NormalizationSpec(ConfigModel):
    """Metric distance range mapped onto normalized inverse depth [-1, 1]."""

    x_min_m: float = MIN_DISTANCE_M
    x_max_m: float = MAX_DISTANCE_M

    @model_validator(mode="after")
    def _check_range(self) -> "NormalizationSpec":
        if not 0 < self.x_min_m < self.x_max_m:
            raise ValueError(
                f"need 0 < x_min_m < x_max_m, got ({self.x_min_m}, {self.x_max_m})"
            )
        return self

    @property
    def inverse_range(self) -> Tuple[float, float]:
        """(1 / x_max, 1 / x_min): the inverse depth interval before normalization."""
        return 1.0 / self.x_max_m, 1.0 / self.x_min_m

    @property
    def drop_value(self) -> float:
        return DROP_VALUE


class DropIndicator(ArrayModel):
    """H x W grid, True = measured, False = dropped."""

    measured: np.ndarray

    @field_validator("measured", mode="before")
    @classmethod
    def _as_bool(cls, value: object) -> np.ndarray:
        return np.asarray(value, dtype=bool)

    @property
    def dropped(self) -> np.ndarray:
        return ~self.measured

    @property
    def measured_count(self) -> int:
        return int(self.measured.sum())

    @property
    def drop_rate(self) -> float:
        return float(self.dropped.mean()) if self.measured.size else 0.0


class RasterMap(ArrayModel):
    """H x W normalized inverse depth; pixels equal to ``drop_value`` are unmeasured."""

    values: np.ndarray
    drop_value: float = DROP_VALUE
    x_min_m: float = MIN_DISTANCE_M
    x_max_m: float = MAX_DISTANCE_M

    @field_validator("values", mode="before")
    @classmethod
    def _as_float32(cls, value: object) -> np.ndarray:
        array = np.asarray(value, dtype=np.float32)
        if array.ndim != 2:
            raise ValueError(f"raster must be 2-D, got shape {array.shape}")
        if not np.isfinite(array).all():
            raise ValueError("raster contains non-finite values")
        if array.size and (array.min() < -1.0 or array.max() > 1.0):
            raise ValueError("raster values must lie in [-1, 1]")
        return array

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def normalization(self) -> NormalizationSpec:
        return NormalizationSpec(x_min_m=self.x_min_m, x_max_m=self.x_max_m)

    def drop_indicator(self) -> DropIndicator:
        """Exact-match drop indicator (native rasters store the drop value exactly)."""
        return DropIndicator(measured=self.values != np.float32(self.drop_value))

    def with_values(self, values: np.ndarray) -> "RasterMap":
        return RasterMap(
            values=values,
            drop_value=self.drop_value,
            x_min_m=self.x_min_m,
            x_max_m=self.x_max_m,
        )


class AngleTable(ArrayModel):
    """Per-pixel elevation and azimuth (radians) used to back-project rasters."""

    elevation: np.ndarray
    azimuth: np.ndarray

    @field_validator("elevation", "azimuth", mode="before")
    @classmethod
    def _as_float64(cls, value: object) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError(f"angle table must be 2-D, got shape {array.shape}")
        return array

    @model_validator(mode="after")
    def _check_shapes(self) -> "AngleTable":
        if self.elevation.shape != self.azimuth.shape:
            raise ValueError(
                f"elevation {self.elevation.shape} and azimuth {self.azimuth.shape} differ"
            )
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.elevation.shape)  # type: ignore[return-value]


class PointCloud(ArrayModel):
    """Cartesian points in meters (x forward, y left, z up)."""

    points: np.ndarray
    pixel_index: Optional[np.ndarray] = None

    @field_validator("points", mode="before")
    @classmethod
    def _as_points(cls, value: object) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.size == 0:
            return array.reshape(0, 3)
        if array.ndim != 2 or array.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got shape {array.shape}")
        return array

    @field_validator("pixel_index", mode="before")
    @classmethod
    def _as_index(cls, value: object) -> Optional[np.ndarray]:
        if value is None:
            return None
        return np.asarray(value, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)


class DropModel(ConfigModel):
    """Ground-truth measurability used by the synthetic scene generator.

    ``uniform`` drops every pixel with ``drop_probability``. ``depth`` raises
    the drop probability linearly from ``near_drop`` to ``far_drop`` with
    range, then shifts it per object by a Gaussian offset in logit space
    (``object_jitter`` is that offset's standard deviation).
    """

    kind: Literal["uniform", "depth"] = "depth"
    drop_probability: float = Field(0.3, ge=0.0, le=1.0)
    near_drop: float = Field(0.02, ge=0.0, le=1.0)
    far_drop: float = Field(0.6, ge=0.0, le=1.0)
    object_jitter: float = Field(1.0, ge=0.0)


class SyntheticScene(ArrayModel):
    """A rendered scene: dense raster, dropped raster and the true drop probabilities."""

    clean: RasterMap
    dropped: RasterMap
    drop_probability: np.ndarray


# ----------------------------------------------------------------------
# Generation and training
# ----------------------------------------------------------------------


class SamplerConfig(ConfigModel):
    """Gumbel-Sigmoid sampler settings."""

    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0.0)
    multilevel: bool = False
    mode: SamplerMode = "train"


class AugmentConfig(ConfigModel):
    """DiffAugment toggles."""

    color: bool = True
    translation: bool = True
    cutout: bool = True

    @property
    def enabled(self) -> bool:
        return self.color or self.translation or self.cutout


class NetworkConfig(ConfigModel):
    """Shape of the generator / discriminator pair."""

    variant: Variant = "dusty1"
    height: int = Field(DEFAULT_HEIGHT, gt=0)
    width: int = Field(DEFAULT_WIDTH, gt=0)
    latent_dim: int = Field(DEFAULT_LATENT_DIM, gt=0)
    base_channels: int = Field(DEFAULT_BASE_CHANNELS, gt=0)

    @model_validator(mode="after")
    def _check_shape(self) -> "NetworkConfig":
        if self.height % 16 or self.width % 16:
            raise ValueError(
                f"raster shape must be divisible by 16, got {self.height}x{self.width}"
            )
        return self

    @property
    def out_channels(self) -> int:
        return VARIANT_CHANNELS[self.variant]


class TrainConfig(NetworkConfig):
    """Full training recipe."""

    batch_size: int = Field(DEFAULT_BATCH_SIZE, gt=0)
    learning_rate: float = Field(DEFAULT_LEARNING_RATE, gt=0.0)
    r1_gamma: float = Field(DEFAULT_R1_GAMMA, ge=0.0)
    ema_decay: float = Field(DEFAULT_EMA_DECAY, ge=0.0, le=1.0)
    iterations: int = Field(500, gt=0)
    seed: int = 0
    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0.0)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    log_every: int = Field(50, gt=0)
    sample_every: int = Field(500, gt=0)
    checkpoint_every: int = Field(1000, gt=0)

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(
            variant=self.variant,
            height=self.height,
            width=self.width,
            latent_dim=self.latent_dim,
            base_channels=self.base_channels,
        )

    def sampler(self, mode: SamplerMode = "train") -> SamplerConfig:
        return SamplerConfig(
            temperature=self.temperature,
            multilevel=self.variant == "dusty2",
            mode=mode,
        )


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------


class JSDGrid(ConfigModel):
    """Bird's-eye occupancy grid used by the JSD metric."""

    bins: int = Field(JSD_BINS, gt=0)
    bound_m: float = Field(JSD_BOUND_M, gt=0.0)

    @property
    def label(self) -> str:
        return f"bev{self.bins}x{self.bins}@{self.bound_m:g}m"


class SWDConfig(ConfigModel):
    """Sliced Wasserstein distance over Laplacian-pyramid patches."""

    levels: int = Field(SWD_LEVELS, gt=0)
    patch_size: int = Field(SWD_PATCH_SIZE, gt=1)
    patches_per_image: int = Field(SWD_PATCHES_PER_IMAGE, gt=0)
    projections: int = Field(SWD_PROJECTIONS, gt=0)
    repeats: int = Field(SWD_REPEATS, gt=0)
    seed: int = 0

    @field_validator("patch_size")
    @classmethod
    def _odd_patch(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"patch size must be odd, got {value}")
        return value


class EvalConfig(ConfigModel):
    """Budgets for distribution metrics between two sets of rasters or clouds."""

    clouds: int = Field(DEFAULT_EVAL_CLOUDS, gt=0)
    points: int = Field(DEFAULT_EVAL_POINTS, gt=0)
    repeats: int = Field(DEFAULT_EVAL_REPEATS, gt=0)
    seed: int = 0
    threads: int = Field(1, gt=0)
    jsd: JSDGrid = Field(default_factory=JSDGrid)
    swd: SWDConfig = Field(default_factory=SWDConfig)


class DistanceMatrix(ArrayModel):
    """Pairwise Chamfer distances, rows indexed by the first set."""

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _as_matrix(cls, value: object) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError(f"distance matrix must be 2-D, got shape {array.shape}")
        if array.size and (not np.isfinite(array).all() or array.min() < 0):
            raise ValueError("distances must be finite and non-negative")
        return array

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


class MetricValue(BaseModel):
    value: float
    std: float = 0.0


class MetricReport(BaseModel):
    """Distribution metrics between a reference and a generated set."""

    jsd: MetricValue
    cov: MetricValue
    mmd: MetricValue
    one_nna: MetricValue
    swd: Optional[MetricValue] = None
    n_ref: int
    n_gen: int
    points_per_cloud: int
    repeats: int = 1
    jsd_grid: str = JSDGrid().label

    @model_validator(mode="after")
    def _check_ranges(self) -> "MetricReport":
        eps = 1e-9
        if not -eps <= self.jsd.value <= math.log(2) + eps:
            raise ValueError(f"jsd {self.jsd.value} outside [0, ln 2]")
        for name in ("cov", "one_nna"):
            value = getattr(self, name).value
            if not -eps <= value <= 1.0 + eps:
                raise ValueError(f"{name} {value} outside [0, 1]")
        return self

    CSV_FIELDS: ClassVar[Tuple[str, ...]] = (
        "jsd",
        "jsd_std",
        "cov",
        "cov_std",
        "mmd",
        "mmd_std",
        "one_nna",
        "one_nna_std",
        "swd",
        "swd_std",
        "n_ref",
        "n_gen",
        "points_per_cloud",
        "repeats",
        "jsd_grid",
    )

    def csv_row(self) -> List[str]:
        swd = self.swd
        return [
            repr(self.jsd.value),
            repr(self.jsd.std),
            repr(self.cov.value),
            repr(self.cov.std),
            repr(self.mmd.value),
            repr(self.mmd.std),
            repr(self.one_nna.value),
            repr(self.one_nna.std),
            repr(swd.value) if swd else "",
            repr(swd.std) if swd else "",
            str(self.n_ref),
            str(self.n_gen),
            str(self.points_per_cloud),
            str(self.repeats),
            self.jsd_grid,
        ]

    @classmethod
    def from_csv_row(cls, row: List[str]) -> "MetricReport":
        values = dict(zip(cls.CSV_FIELDS, row))

        def metric(name: str) -> MetricValue:
            return MetricValue(value=float(values[name]), std=float(values[f"{name}_std"]))

        return cls(
            jsd=metric("jsd"),
            cov=metric("cov"),
            mmd=metric("mmd"),
            one_nna=metric("one_nna"),
            swd=metric("swd") if values["swd"] else None,
            n_ref=int(values["n_ref"]),
            n_gen=int(values["n_gen"]),
            points_per_cloud=int(values["points_per_cloud"]),
            repeats=int(values["repeats"]),
            jsd_grid=values["jsd_grid"],
        )


class DepthErrorReport(BaseModel):
    """Standard depth-estimation errors over co-measured pixels (metric depth)."""

    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    pixels: int

    @model_validator(mode="after")
    def _check_deltas(self) -> "DepthErrorReport":
        if not 0.0 <= self.delta1 <= self.delta2 <= self.delta3 <= 1.0:
            raise ValueError("delta accuracies must be nondecreasing within [0, 1]")
        return self


class ToleranceConfig(ConfigModel):
    """Relative drop tolerance and its random search."""

    beta: float = Field(0.0, ge=0.0)
    lower: float = Field(TOLERANCE_BOUNDS[0], gt=0.0)
    upper: float = Field(TOLERANCE_BOUNDS[1], gt=0.0)
    trials: int = Field(TOLERANCE_TRIALS, gt=0)
    points: int = Field(TOLERANCE_POINTS, gt=0)
    seed: int = 0
    weights: Dict[str, float] = Field(default_factory=lambda: dict(SCORE_WEIGHTS))

    @model_validator(mode="after")
    def _check_bounds(self) -> "ToleranceConfig":
        if self.lower >= self.upper:
            raise ValueError(f"need lower < upper, got [{self.lower}, {self.upper}]")
        if set(self.weights) != set(SCORE_WEIGHTS):
            raise ValueError(f"weights must name exactly {sorted(SCORE_WEIGHTS)}")
        return self


# ----------------------------------------------------------------------
# Inversion
# ----------------------------------------------------------------------


class LatentCode(ArrayModel):
    """A d-dimensional latent vector, optionally kept on the radius-sqrt(d) sphere."""

    values: np.ndarray
    constrained: bool = True

    @field_validator("values", mode="before")
    @classmethod
    def _as_vector(cls, value: object) -> np.ndarray:
        return np.asarray(value, dtype=np.float64).reshape(-1)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


class InversionConfig(ConfigModel):
    """Latent optimization settings (noise variance noise_scale * t^2, t: 1 -> 0)."""

    iterations: int = Field(INVERSION_ITERATIONS, ge=1)
    learning_rate: float = Field(INVERSION_LEARNING_RATE, gt=0.0)
    noise_scale: float = Field(INVERSION_NOISE_SCALE, ge=0.0)
    constrained: bool = True
    restarts: int = Field(1, ge=1)
    seed: int = 0

    def progress(self, iteration: int) -> float:
        """t for a 0-based iteration: 1 at the start, exactly 0 at the end."""
        if self.iterations == 1:
            return 0.0
        return 1.0 - iteration / (self.iterations - 1)

    def noise_std(self, iteration: int) -> float:
        t = self.progress(iteration)
        return math.sqrt(self.noise_scale) * t


class CorruptionSpec(ConfigModel):
    """One of the three corruption regimes applied to an inversion target."""

    kind: CorruptionKind
    drop_probability: float = Field(0.9, ge=0.0, le=1.0)
    keep_lines: int = Field(8, ge=1)
    noise_variance: float = Field(0.01, ge=0.0)
    noise_space: Literal["normalized", "metric"] = "normalized"
    seed: int = 0


# ----------------------------------------------------------------------
# Runs
# ----------------------------------------------------------------------


class SynthConfig(ConfigModel):
    """Synthetic dataset settings for the ``synth`` command."""

    count: int = Field(256, ge=0)
    height: int = Field(DEFAULT_HEIGHT, gt=0)
    width: int = Field(DEFAULT_WIDTH, gt=0)
    seed: int = 0
    drop: DropModel = Field(default_factory=DropModel)
    normalization: NormalizationSpec = Field(default_factory=NormalizationSpec)


class GenerateConfig(ConfigModel):
    """Sampling settings for the ``generate`` command."""

    count: int = Field(16, gt=0)
    seed: int = 0
    mode: SamplerMode = "test"
    ema: bool = True
    tolerance: float = Field(0.0, ge=0.0)
    ply: bool = True


class RunManifest(BaseModel):
    """Everything needed to re-run a command."""

    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    version: str
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    started_at: str
    wall_clock_s: float = 0.0


class Checkpoint(ArrayModel):
    """Named float32 arrays plus a JSON header (step, config, optimizer and RNG state)."""

    header: Dict[str, Any] = Field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = Field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        """Arrays whose name starts with ``prefix.``, with the prefix stripped."""
        lead = f"{prefix}."
        return {
            name[len(lead) :]: value
            for name, value in self.tensors.items()
            if name.startswith(lead)
        }
