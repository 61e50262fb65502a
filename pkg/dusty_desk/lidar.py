"""LiDAR scans as cylindrical inverse-depth rasters.

Axis convention used everywhere: x forward, y left, z up. Azimuth is measured
from +x toward +y, elevation from the horizontal plane toward +z. Row 0 of a
raster is the top laser, and columns sweep azimuth from +pi down to -pi.
"""

import logging
from typing import Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import (
    DEFAULT_FOV_DOWN_DEG,
    DEFAULT_FOV_UP_DEG,
    DEFAULT_HEIGHT,
    DEFAULT_WIDTH,
    DROP_VALUE,
    SENSOR_HEIGHT_M,
)
from .errors import ConfigError, DimensionError, IngestionError
from .models import (
    AngleTable,
    DropModel,
    NormalizationSpec,
    PointCloud,
    RasterMap,
    SyntheticScene,
)

logger = logging.getLogger(__name__)

DEFAULT_SPEC = NormalizationSpec()

Chunking = Literal["position", "ring"]
SeedLike = Union[int, np.random.SeedSequence]


# ----------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------


def normalize(
    distance_m: Union[float, np.ndarray], spec: NormalizationSpec = DEFAULT_SPEC
) -> np.ndarray:
    """Metric distance -> normalized inverse depth (1/x_min -> +1, 1/x_max -> -1).

    Distances outside the sensor range are clamped to the nearest bound.
    """
    distance = np.asarray(distance_m, dtype=np.float64)
    clamped = np.clip(distance, spec.x_min_m, spec.x_max_m)
    outside = int(np.count_nonzero(clamped != distance))
    if outside:
        logger.warning(
            "%d distance(s) outside [%g, %g] m clamped", outside, spec.x_min_m, spec.x_max_m
        )
    low, high = spec.inverse_range
    return 2.0 * (1.0 / clamped - low) / (high - low) - 1.0


def denormalize(
    value: Union[float, np.ndarray], spec: NormalizationSpec = DEFAULT_SPEC
) -> np.ndarray:
    """Normalized inverse depth -> metric distance."""
    low, high = spec.inverse_range
    inverse = (np.asarray(value, dtype=np.float64) + 1.0) * 0.5 * (high - low) + low
    return 1.0 / inverse


# ----------------------------------------------------------------------
# Point sequences -> rasters
# ----------------------------------------------------------------------


def _row_chunks(
    points: np.ndarray, height: int, chunking: Chunking, rings: Optional[np.ndarray]
) -> List[np.ndarray]:
    if chunking == "position":
        return list(np.array_split(points, height))
    if rings is None:
        raise ConfigError("ring chunking needs a per-point ring id")
    rings = np.asarray(rings).reshape(-1)
    if rings.shape[0] != points.shape[0]:
        raise DimensionError(f"{rings.shape[0]} ring ids for {points.shape[0]} points")
    return [points[rings == row] for row in range(height)]


def sequence_to_grid(
    points: np.ndarray,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    chunking: Chunking = "position",
    rings: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Stack an ordered point sequence into an H x W x 3 grid of Cartesian points.

    The sequence is cut into ``height`` sub-sequences (by position, or by ring
    id) and each is subsampled to ``width`` points with an even stride from
    phase 0. Unmeasured points stay as given (zero or NaN).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionError(f"points must be (n, 3), got {points.shape}")
    if chunking == "position" and points.shape[0] < height * width:
        raise IngestionError(
            f"sequence of {points.shape[0]} points is shorter than {height} x {width}"
        )

    grid = np.zeros((height, width, 3), dtype=np.float64)
    for row, chunk in enumerate(_row_chunks(points, height, chunking, rings)):
        if chunk.shape[0] < width:
            raise IngestionError(f"row {row} has {chunk.shape[0]} points, need {width}")
        index = (np.arange(width) * chunk.shape[0]) // width
        grid[row] = chunk[index]
    return grid


def grid_measured(grid: np.ndarray) -> np.ndarray:
    distance = np.linalg.norm(grid, axis=-1)
    return np.isfinite(distance) & (distance > 0)


def grid_to_raster(grid: np.ndarray, spec: NormalizationSpec = DEFAULT_SPEC) -> RasterMap:
    """Cartesian grid -> normalized inverse-depth raster (unmeasured -> drop value)."""
    measured = grid_measured(grid)
    distance = np.linalg.norm(np.where(measured[..., None], grid, 1.0), axis=-1)
    values = np.where(measured, normalize(distance, spec), DROP_VALUE)
    return RasterMap(
        values=values.astype(np.float32),
        x_min_m=spec.x_min_m,
        x_max_m=spec.x_max_m,
    )


def sequence_to_raster(
    points: np.ndarray,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    chunking: Chunking = "position",
    rings: Optional[np.ndarray] = None,
    spec: NormalizationSpec = DEFAULT_SPEC,
) -> RasterMap:
    """Ordered point sequence -> RasterMap (see ``sequence_to_grid``)."""
    return grid_to_raster(sequence_to_grid(points, height, width, chunking, rings), spec)


# ----------------------------------------------------------------------
# Angles
# ----------------------------------------------------------------------


def grid_angles(grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(elevation, azimuth, measured) per pixel of a Cartesian grid."""
    measured = grid_measured(grid)
    safe = np.where(measured[..., None], grid, 0.0)
    elevation = np.arctan2(safe[..., 2], np.hypot(safe[..., 0], safe[..., 1]))
    azimuth = np.arctan2(safe[..., 1], safe[..., 0])
    return elevation, azimuth, measured


def default_angle_table(
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    fov_up_deg: float = DEFAULT_FOV_UP_DEG,
    fov_down_deg: float = DEFAULT_FOV_DOWN_DEG,
) -> AngleTable:
    """Scanner with linearly spaced lasers and evenly spaced azimuth columns."""
    elevation = np.deg2rad(np.linspace(fov_up_deg, fov_down_deg, height))
    azimuth = np.pi - 2.0 * np.pi * (np.arange(width) + 0.5) / width
    return AngleTable(
        elevation=np.repeat(elevation[:, None], width, axis=1),
        azimuth=np.repeat(azimuth[None, :], height, axis=0),
    )


def _fill_row(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    columns = np.arange(values.shape[0])
    return np.interp(columns, columns[observed], values[observed], period=values.shape[0])


def compute_angle_table(grids: Iterable[np.ndarray]) -> AngleTable:
    """Per-pixel mean angles over a training set of Cartesian grids.

    Elevation is averaged arithmetically, azimuth as a mean direction so the
    +-pi seam does not bias it. Pixels never measured are filled by circular
    interpolation along their row.
    """
    total_elevation = total_sin = total_cos = count = None
    for grid in grids:
        elevation, azimuth, measured = grid_angles(np.asarray(grid, dtype=np.float64))
        if total_elevation is None:
            total_elevation = np.zeros(measured.shape)
            total_sin = np.zeros(measured.shape)
            total_cos = np.zeros(measured.shape)
            count = np.zeros(measured.shape)
        elif measured.shape != count.shape:
            raise DimensionError(f"grid shape {measured.shape} differs from {count.shape}")
        weight = measured.astype(np.float64)
        total_elevation += weight * elevation
        total_sin += weight * np.sin(azimuth)
        total_cos += weight * np.cos(azimuth)
        count += weight
    if count is None:
        raise ConfigError("compute_angle_table needs at least one sample")

    observed = count > 0
    mean_elevation = np.divide(total_elevation, count, out=np.zeros_like(count), where=observed)
    mean_sin = np.divide(total_sin, count, out=np.zeros_like(count), where=observed)
    mean_cos = np.divide(total_cos, count, out=np.zeros_like(count), where=observed)

    for row in range(count.shape[0]):
        row_observed = observed[row]
        if not row_observed.any():
            raise ConfigError(f"row {row} was never measured; cannot estimate its angles")
        if row_observed.all():
            continue
        mean_elevation[row] = _fill_row(mean_elevation[row], row_observed)
        mean_sin[row] = _fill_row(mean_sin[row], row_observed)
        mean_cos[row] = _fill_row(mean_cos[row], row_observed)

    return AngleTable(elevation=mean_elevation, azimuth=np.arctan2(mean_sin, mean_cos))


# ----------------------------------------------------------------------
# Rasters -> points
# ----------------------------------------------------------------------


def angles_to_directions(table: AngleTable) -> np.ndarray:
    """Unit ray direction per pixel, shape H x W x 3."""
    cos_el = np.cos(table.elevation)
    return np.stack(
        (cos_el * np.cos(table.azimuth), cos_el * np.sin(table.azimuth), np.sin(table.elevation)),
        axis=-1,
    )


def raster_to_points(raster: RasterMap, table: AngleTable) -> PointCloud:
    """Back-project every non-drop pixel; returns one point per measured pixel."""
    if raster.shape != table.shape:
        raise DimensionError(f"raster {raster.shape} and angle table {table.shape} differ")
    measured = raster.drop_indicator().measured
    index = np.flatnonzero(measured)
    distance = denormalize(raster.values.reshape(-1)[index], raster.normalization)
    directions = angles_to_directions(table).reshape(-1, 3)[index]
    return PointCloud(points=directions * distance[:, None], pixel_index=index)


# ----------------------------------------------------------------------
# Synthetic scenes
# ----------------------------------------------------------------------

# drop probability reaches ``far_drop`` at this range in the depth model
FAR_REFERENCE_M = 60.0


def _hit_walls(directions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Distance to a random closed polygon of vertical walls around the sensor."""
    sides = int(rng.integers(5, 9))
    angles = 2.0 * np.pi * (np.arange(sides) + rng.uniform(0.1, 0.9, sides)) / sides
    radii = rng.uniform(20.0, 60.0, sides)
    vertices = np.stack((radii * np.cos(angles), radii * np.sin(angles)), axis=-1)

    horizontal = directions[..., :2]
    planar = np.linalg.norm(horizontal, axis=-1)
    dx, dy = horizontal[..., 0], horizontal[..., 1]
    best = np.full(planar.shape, np.inf)
    for k in range(sides):
        start, end = vertices[k], vertices[(k + 1) % sides]
        edge = end - start
        denom = dx * edge[1] - dy * edge[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (start[0] * edge[1] - start[1] * edge[0]) / denom
            u = (start[0] * dy - start[1] * dx) / denom
        hit = (np.abs(denom) > 1e-12) & (s > 0) & (u >= 0) & (u <= 1)
        best = np.where(hit & (s < best), s, best)
    # s is the horizontal travel per unit of horizontal direction
    with np.errstate(divide="ignore"):
        return np.where(planar > 1e-9, best, np.inf)


def _hit_box(
    directions: np.ndarray,
    center: np.ndarray,
    half_size: np.ndarray,
    yaw: float,
    z_range: Tuple[float, float],
) -> np.ndarray:
    """Slab test of every ray against one yawed box; inf where missed."""
    cos_y, sin_y = np.cos(-yaw), np.sin(-yaw)
    origin = np.array(
        [
            cos_y * (-center[0]) - sin_y * (-center[1]),
            sin_y * (-center[0]) + cos_y * (-center[1]),
            0.0,
        ]
    )
    local = np.stack(
        (
            cos_y * directions[..., 0] - sin_y * directions[..., 1],
            sin_y * directions[..., 0] + cos_y * directions[..., 1],
            directions[..., 2],
        ),
        axis=-1,
    )
    local = np.where(np.abs(local) < 1e-12, 1e-12, local)
    low = np.array([-half_size[0], -half_size[1], z_range[0]])
    high = np.array([half_size[0], half_size[1], z_range[1]])
    t1 = (low - origin) / local
    t2 = (high - origin) / local
    t_near = np.minimum(t1, t2).max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _drop_probability(
    distance: np.ndarray, objects: np.ndarray, model: DropModel, rng: np.random.Generator
) -> np.ndarray:
    if model.kind == "uniform":
        return np.full(distance.shape, model.drop_probability)
    fraction = np.clip(distance / FAR_REFERENCE_M, 0.0, 1.0)
    base = model.near_drop + (model.far_drop - model.near_drop) * fraction
    offsets = rng.normal(0.0, model.object_jitter, int(objects.max()) + 1)
    if model.object_jitter == 0:
        return base
    base = np.clip(base, 1e-6, 1.0 - 1e-6)
    logits = np.log(base / (1.0 - base)) + offsets[objects]
    return 1.0 / (1.0 + np.exp(-logits))


def synth_scene(
    seed: SeedLike,
    shape: Tuple[int, int] = (DEFAULT_HEIGHT, DEFAULT_WIDTH),
    drop_model: Optional[DropModel] = None,
    table: Optional[AngleTable] = None,
    spec: NormalizationSpec = DEFAULT_SPEC,
) -> SyntheticScene:
    """Render ground, enclosing walls and boxes, then drop pixels at random.

    Every ray hits something, so the clean raster is dense. Drops are
    Bernoulli draws from the returned ground-truth probabilities.
    """
    rng = np.random.default_rng(seed)
    drop_model = drop_model or DropModel()
    height, width = shape
    table = table or default_angle_table(height, width)
    if table.shape != (height, width):
        raise DimensionError(f"angle table {table.shape} does not match shape {shape}")
    directions = angles_to_directions(table)

    candidates = []
    # ground plane below the sensor
    with np.errstate(divide="ignore"):
        ground = np.where(directions[..., 2] < -1e-9, -SENSOR_HEIGHT_M / directions[..., 2], np.inf)
    candidates.append(ground)

    planar = np.linalg.norm(directions[..., :2], axis=-1)
    candidates.append(_hit_walls(directions, rng) / np.maximum(planar, 1e-12))

    for _ in range(int(rng.integers(2, 8))):
        radius = rng.uniform(4.0, 18.0)
        bearing = rng.uniform(-np.pi, np.pi)
        center = np.array([radius * np.cos(bearing), radius * np.sin(bearing)])
        half_size = rng.uniform(0.75, 2.5, 2)
        top = -SENSOR_HEIGHT_M + rng.uniform(1.0, 3.0)
        yaw = rng.uniform(0.0, np.pi)
        candidates.append(_hit_box(directions, center, half_size, yaw, (-SENSOR_HEIGHT_M, top)))

    stacked = np.stack(candidates)
    objects = np.argmin(stacked, axis=0)
    distance = np.clip(np.min(stacked, axis=0), spec.x_min_m, spec.x_max_m)

    clean = normalize(distance, spec).astype(np.float32)
    probability = _drop_probability(distance, objects, drop_model, rng)
    drops = rng.random(clean.shape) < probability
    dropped = np.where(drops, np.float32(DROP_VALUE), clean)

    return SyntheticScene(
        clean=RasterMap(values=clean, x_min_m=spec.x_min_m, x_max_m=spec.x_max_m),
        dropped=RasterMap(values=dropped, x_min_m=spec.x_min_m, x_max_m=spec.x_max_m),
        drop_probability=probability,
    )


def synth_dataset(
    count: int,
    seed: int,
    shape: Tuple[int, int] = (DEFAULT_HEIGHT, DEFAULT_WIDTH),
    drop_model: Optional[DropModel] = None,
    spec: NormalizationSpec = DEFAULT_SPEC,
) -> List[SyntheticScene]:
    """``count`` independent scenes whose seeds are spawned from ``seed``."""
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    table = default_angle_table(*shape)
    children = np.random.SeedSequence(seed).spawn(count)
    return [synth_scene(child, shape, drop_model, table, spec) for child in children]


def stack_rasters(rasters: Sequence[RasterMap]) -> np.ndarray:
    """N x H x W float32 array of raster values."""
    if not rasters:
        return np.zeros((0, DEFAULT_HEIGHT, DEFAULT_WIDTH), dtype=np.float32)
    return np.stack([r.values for r in rasters]).astype(np.float32)
