"""Point-cloud and raster distribution metrics.

All nearest-neighbour queries are exact. Distances between clouds are Chamfer
distances with squared Euclidean terms, averaged per direction.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.ndimage
from scipy.stats import entropy

from .errors import ConfigError, DimensionError
from .lidar import denormalize
from .models import (
    DepthErrorReport,
    DistanceMatrix,
    EvalConfig,
    JSDGrid,
    MetricReport,
    MetricValue,
    NormalizationSpec,
    PointCloud,
    RasterMap,
    SWDConfig,
)

logger = logging.getLogger(__name__)

Points = Union[PointCloud, np.ndarray]

# rows of A compared against all of B per block
CHAMFER_BLOCK = 512


def _points(cloud: Points) -> np.ndarray:
    array = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if array.ndim != 2:
        raise DimensionError(f"expected an (n, dim) point array, got {array.shape}")
    return array


def _matrix(dist: Union[DistanceMatrix, np.ndarray]) -> np.ndarray:
    return dist.values if isinstance(dist, DistanceMatrix) else DistanceMatrix(values=dist).values


# ----------------------------------------------------------------------
# Sampling and pairwise distances
# ----------------------------------------------------------------------


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a_i - b_j|^2 from explicit differences (exact zeros for equal points)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def fps_indices(points: Points, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy max-min selection from a random start; returns k distinct indices."""
    array = _points(points)
    n = array.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"cannot pick {k} points from a cloud of {n}")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = rng.integers(n)
    nearest = squared_distances(array, array[selected[0] : selected[0] + 1])[:, 0]
    nearest[selected[0]] = -np.inf
    for i in range(1, k):
        index = int(np.argmax(nearest))
        selected[i] = index
        nearest = np.minimum(nearest, squared_distances(array, array[index : index + 1])[:, 0])
        nearest[selected[: i + 1]] = -np.inf
    return selected


def fps(points: Points, k: int, seed: int = 0) -> PointCloud:
    """Farthest point sampling of ``k`` points, seeded start."""
    index = fps_indices(points, k, np.random.default_rng(seed))
    if isinstance(points, PointCloud):
        pixel = points.pixel_index[index] if points.pixel_index is not None else None
        return PointCloud(points=points.points[index], pixel_index=pixel)
    return PointCloud(points=np.asarray(points, dtype=np.float64)[index])


def chamfer(a: Points, b: Points) -> float:
    """Mean squared nearest distance A->B plus B->A."""
    pa, pb = _points(a), _points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ConfigError("chamfer distance needs two non-empty clouds")
    if pa.shape[1] != pb.shape[1]:
        raise DimensionError(f"point dimensions differ: {pa.shape[1]} vs {pb.shape[1]}")
    a_to_b = np.empty(pa.shape[0])
    b_to_a = np.full(pb.shape[0], np.inf)
    for start in range(0, pa.shape[0], CHAMFER_BLOCK):
        block = squared_distances(pa[start : start + CHAMFER_BLOCK], pb)
        a_to_b[start : start + CHAMFER_BLOCK] = block.min(axis=1)
        b_to_a = np.minimum(b_to_a, block.min(axis=0))
    return float(np.mean(a_to_b) + np.mean(b_to_a))


def distance_matrix(
    rows: Sequence[Points], columns: Sequence[Points], threads: int = 1
) -> DistanceMatrix:
    """Chamfer distance between every row cloud and every column cloud."""
    if not rows or not columns:
        raise ConfigError("distance matrix needs two non-empty sets")

    def row(i: int) -> List[float]:
        return [chamfer(rows[i], column) for column in columns]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(row, range(len(rows))))
    else:
        values = [row(i) for i in range(len(rows))]
    return DistanceMatrix(values=np.array(values, dtype=np.float64))


# ----------------------------------------------------------------------
# Set metrics
# ----------------------------------------------------------------------


def bev_histogram(clouds: Sequence[Points], grid: JSDGrid) -> np.ndarray:
    """Bird's-eye occupancy counts of all points of a set (points outside dropped)."""
    counts = np.zeros((grid.bins, grid.bins))
    bounds = [[-grid.bound_m, grid.bound_m], [-grid.bound_m, grid.bound_m]]
    for cloud in clouds:
        array = _points(cloud)
        if array.shape[0] == 0:
            continue
        hist, _, _ = np.histogram2d(array[:, 0], array[:, 1], bins=grid.bins, range=bounds)
        counts += hist
    return counts


def jsd_histograms(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence (natural log) between two count arrays."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise DimensionError(f"histograms differ in size: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ConfigError("histograms must be non-negative")
    if p.sum() == 0 or q.sum() == 0:
        raise ConfigError("cannot compare an empty histogram")
    p = p / p.sum()
    q = q / q.sum()
    value = entropy((p + q) / 2.0) - (entropy(p) + entropy(q)) / 2.0
    return float(min(max(value, 0.0), math.log(2.0)))


def jsd(ref: Sequence[Points], gen: Sequence[Points], grid: Optional[JSDGrid] = None) -> float:
    grid = grid or JSDGrid()
    return jsd_histograms(bev_histogram(ref, grid), bev_histogram(gen, grid))


def cov_mmd(dist: Union[DistanceMatrix, np.ndarray]) -> Tuple[float, float]:
    """Coverage and minimum matching distance from a ref x gen matrix."""
    matrix = _matrix(dist)
    if matrix.size == 0:
        raise ConfigError("coverage needs a non-empty distance matrix")
    matched = np.unique(np.argmin(matrix, axis=0))
    cov = matched.size / matrix.shape[0]
    mmd = float(np.mean(np.min(matrix, axis=1)))
    return float(cov), mmd


def union_matrix(
    ref_ref: Union[DistanceMatrix, np.ndarray],
    ref_gen: Union[DistanceMatrix, np.ndarray],
    gen_gen: Union[DistanceMatrix, np.ndarray],
) -> np.ndarray:
    """Block matrix over ref followed by gen."""
    rr, rg, gg = _matrix(ref_ref), _matrix(ref_gen), _matrix(gen_gen)
    return np.block([[rr, rg], [rg.T, gg]])


def one_nna(union: np.ndarray, n_ref: int) -> float:
    """Leave-one-out 1-NN accuracy over ref (first ``n_ref``) and gen.

    A sample counts as correct only when its nearest same-source neighbour is
    strictly closer than its nearest other-source neighbour.
    """
    matrix = np.asarray(union, dtype=np.float64)
    total = matrix.shape[0]
    if matrix.ndim != 2 or matrix.shape[1] != total:
        raise DimensionError(f"union matrix must be square, got {matrix.shape}")
    if total < 2:
        raise ConfigError("1-NNA needs at least two samples")
    if not 0 <= n_ref <= total:
        raise ConfigError(f"n_ref {n_ref} outside [0, {total}]")

    labels = np.arange(total) < n_ref
    masked = matrix.copy()
    np.fill_diagonal(masked, np.inf)
    same = labels[:, None] == labels[None, :]
    nearest_same = np.where(same, masked, np.inf).min(axis=1)
    nearest_other = np.where(same, np.inf, masked).min(axis=1)
    return float(np.mean(nearest_same < nearest_other))


# ----------------------------------------------------------------------
# Sliced Wasserstein distance
# ----------------------------------------------------------------------

_PYRAMID_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _smooth(images: np.ndarray, gain: float = 1.0) -> np.ndarray:
    """Separable 5-tap blur; wraps horizontally, mirrors vertically."""
    out = scipy.ndimage.correlate1d(images, _PYRAMID_TAPS * gain, axis=-1, mode="wrap")
    return scipy.ndimage.correlate1d(out, _PYRAMID_TAPS * gain, axis=-2, mode="mirror")


def pyr_down(images: np.ndarray) -> np.ndarray:
    return _smooth(images)[..., ::2, ::2]


def pyr_up(images: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    up = np.zeros(images.shape[:-2] + shape, dtype=np.float64)
    up[..., ::2, ::2] = images
    return _smooth(up, gain=2.0)


def laplacian_pyramid(images: np.ndarray, levels: int) -> List[np.ndarray]:
    """Band-pass levels, finest first; the last entry is the low-pass residual."""
    pyramid = [np.asarray(images, dtype=np.float64)]
    for _ in range(1, levels):
        low = pyr_down(pyramid[-1])
        pyramid[-1] = pyramid[-1] - pyr_up(low, pyramid[-1].shape[-2:])
        pyramid.append(low)
    return pyramid


def usable_levels(shape: Tuple[int, int], config: SWDConfig) -> int:
    """Pyramid depth such that every level still fits a patch."""
    height, width = shape
    if min(height, width) < config.patch_size:
        raise ConfigError(f"raster {shape} is smaller than the {config.patch_size}px patch")
    levels = 1
    while levels < config.levels:
        height, width = (height + 1) // 2, (width + 1) // 2
        if min(height, width) < config.patch_size:
            break
        levels += 1
    if levels < config.levels:
        logger.warning(
            "SWD pyramid truncated to %d level(s): %dx%d rasters are too small for %d",
            levels,
            shape[0],
            shape[1],
            config.levels,
        )
    return levels


def patch_descriptors(
    images: np.ndarray, count: int, patch: int, rng: np.random.Generator
) -> np.ndarray:
    """``count`` patches per image at random centres (columns wrap)."""
    n, height, width = images.shape
    radius = patch // 2
    centre_y = rng.integers(radius, height - radius, (n, count))
    centre_x = rng.integers(0, width, (n, count))
    offsets = np.arange(-radius, radius + 1)
    rows = centre_y[..., None, None] + offsets[:, None]
    cols = (centre_x[..., None, None] + offsets[None, :]) % width
    images_index = np.arange(n)[:, None, None, None]
    return images[images_index, rows, cols].reshape(n * count, patch * patch)


def sliced_wasserstein(
    a: np.ndarray, b: np.ndarray, projections: int, rng: np.random.Generator
) -> float:
    """Mean |sorted(a u) - sorted(b u)| over random unit directions u."""
    directions = rng.standard_normal((a.shape[1], projections))
    directions /= np.sqrt(np.sum(directions * directions, axis=0, keepdims=True))
    proj_a = np.sort(a @ directions, axis=0)
    proj_b = np.sort(b @ directions, axis=0)
    return float(np.mean(np.abs(proj_a - proj_b)))


def swd(ref: np.ndarray, gen: np.ndarray, config: Optional[SWDConfig] = None) -> float:
    """Sliced Wasserstein distance between Laplacian-pyramid patch sets.

    Both sets use the same patch positions and projections. Descriptors are
    standardized with the reference set's statistics.
    """
    config = config or SWDConfig()
    ref = np.asarray(ref, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if ref.ndim != 3 or gen.ndim != 3 or ref.shape[1:] != gen.shape[1:]:
        raise DimensionError(f"raster sets must share an H x W shape: {ref.shape} vs {gen.shape}")
    count = min(ref.shape[0], gen.shape[0])
    if count == 0:
        raise ConfigError("SWD needs non-empty raster sets")
    levels = usable_levels(ref.shape[1:], config)
    ref_pyramid = laplacian_pyramid(ref[:count], levels)
    gen_pyramid = laplacian_pyramid(gen[:count], levels)

    results = []
    for repeat in range(config.repeats):
        for level, (ref_level, gen_level) in enumerate(zip(ref_pyramid, gen_pyramid)):
            seed = [config.seed, repeat, level]
            ref_desc = patch_descriptors(
                ref_level, config.patches_per_image, config.patch_size, np.random.default_rng(seed)
            )
            gen_desc = patch_descriptors(
                gen_level, config.patches_per_image, config.patch_size, np.random.default_rng(seed)
            )
            mean = ref_desc.mean()
            std = max(float(ref_desc.std()), 1e-8)
            results.append(
                sliced_wasserstein(
                    (ref_desc - mean) / std,
                    (gen_desc - mean) / std,
                    config.projections,
                    np.random.default_rng(seed + [1]),
                )
            )
    return float(np.mean(results))


# ----------------------------------------------------------------------
# Depth errors
# ----------------------------------------------------------------------


def depth_errors_metric(
    pred_m: np.ndarray, target_m: np.ndarray, valid: Optional[np.ndarray] = None
) -> DepthErrorReport:
    """Depth-estimation errors on metric depths over ``valid`` pixels."""
    pred = np.asarray(pred_m, dtype=np.float64)
    target = np.asarray(target_m, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    pred, target = pred[valid], target[valid]
    if pred.size == 0:
        raise ConfigError("no co-measured pixels to compare")
    if np.any(pred <= 0) or np.any(target <= 0):
        raise ConfigError("metric depths must be positive")

    diff = pred - target
    ratio = np.maximum(pred / target, target / pred)
    return DepthErrorReport(
        abs_rel=float(np.mean(np.abs(diff) / target)),
        sq_rel=float(np.mean(diff * diff / target)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(target)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        pixels=int(pred.size),
    )


def depth_errors(pred: RasterMap, target: RasterMap) -> DepthErrorReport:
    """Errors over pixels measured in both rasters, in metres."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    valid = pred.drop_indicator().measured & target.drop_indicator().measured
    spec: NormalizationSpec = target.normalization
    return depth_errors_metric(
        denormalize(pred.values, spec), denormalize(target.values, spec), valid
    )


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------


def _subsample(
    clouds: Sequence[PointCloud], config: EvalConfig, repeat: int
) -> Tuple[List[PointCloud], List[PointCloud]]:
    """Seeded choice of clouds, returned whole and reduced to ``config.points`` by FPS."""
    chooser = np.random.default_rng([config.seed, repeat])
    count = min(config.clouds, len(clouds))
    chosen = np.sort(chooser.permutation(len(clouds))[:count])
    whole, reduced = [], []
    for index in chosen:
        cloud = clouds[int(index)]
        whole.append(cloud)
        if len(cloud) <= config.points:
            reduced.append(cloud)
            continue
        rng = np.random.default_rng([config.seed, repeat, int(index)])
        keep = fps_indices(cloud, config.points, rng)
        reduced.append(PointCloud(points=cloud.points[keep]))
    return whole, reduced


def _summary(values: Sequence[float]) -> MetricValue:
    return MetricValue(value=float(np.mean(values)), std=float(np.std(values)))


def evaluate_sets(
    ref: Sequence[PointCloud],
    gen: Sequence[PointCloud],
    config: Optional[EvalConfig] = None,
    ref_rasters: Optional[np.ndarray] = None,
    gen_rasters: Optional[np.ndarray] = None,
) -> MetricReport:
    """All distribution metrics, mean and std over ``config.repeats`` seeds."""
    config = config or EvalConfig()
    if len(ref) == 0 or len(gen) == 0:
        raise ConfigError("evaluation needs non-empty reference and generated sets")
    if any(len(cloud) == 0 for cloud in list(ref) + list(gen)):
        raise ConfigError("evaluation clouds must be non-empty")

    scores: Dict[str, List[float]] = {name: [] for name in ("jsd", "cov", "mmd", "one_nna", "swd")}
    for repeat in range(config.repeats):
        ref_whole, ref_sub = _subsample(ref, config, repeat)
        gen_whole, gen_sub = _subsample(gen, config, repeat)
        ref_gen = distance_matrix(ref_sub, gen_sub, config.threads)
        ref_ref = distance_matrix(ref_sub, ref_sub, config.threads)
        gen_gen = distance_matrix(gen_sub, gen_sub, config.threads)

        cov, mmd = cov_mmd(ref_gen)
        scores["jsd"].append(jsd(ref_whole, gen_whole, config.jsd))
        scores["cov"].append(cov)
        scores["mmd"].append(mmd)
        scores["one_nna"].append(one_nna(union_matrix(ref_ref, ref_gen, gen_gen), len(ref_sub)))
        if ref_rasters is not None and gen_rasters is not None:
            swd_config = config.swd.model_copy(update={"seed": config.swd.seed + repeat})
            scores["swd"].append(swd(ref_rasters, gen_rasters, swd_config))
        logger.debug("evaluation repeat %d: cov %.4f mmd %.6f", repeat, cov, mmd)

    return MetricReport(
        jsd=_summary(scores["jsd"]),
        cov=_summary(scores["cov"]),
        mmd=_summary(scores["mmd"]),
        one_nna=_summary(scores["one_nna"]),
        swd=_summary(scores["swd"]) if scores["swd"] else None,
        n_ref=min(config.clouds, len(ref)),
        n_gen=min(config.clouds, len(gen)),
        points_per_cloud=config.points,
        repeats=config.repeats,
        jsd_grid=config.jsd.label,
    )
