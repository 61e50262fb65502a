"""Relative point-drop tolerance and its weighted-score search.

Models without a measurability branch emit near-drop values instead of the
exact drop value. A pixel counts as dropped when it lies within
``beta * range`` of the drop value, where ``range`` is the width of the
normalized inverse-depth interval.
"""

import logging
import math
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from rich.progress import BarColumn, Progress, TextColumn

from .console import console
from .constants import NORMALIZED_RANGE, SCORE_WEIGHTS
from .errors import ConfigError
from .lidar import raster_to_points
from .metrics import evaluate_sets
from .models import (
    AngleTable,
    DropIndicator,
    EvalConfig,
    MetricReport,
    PointCloud,
    RasterMap,
    ToleranceConfig,
)

logger = logging.getLogger(__name__)


class ToleranceTrial(BaseModel):
    beta: float
    score: float


class ToleranceResult(BaseModel):
    """Best tolerance found and every trial in draw order."""

    beta: float
    score: float
    trials: List[ToleranceTrial]


def drop_threshold(raster: RasterMap, beta: float) -> DropIndicator:
    """Pixels within ``beta * range`` of the drop value are dropped; beta = 0 is exact."""
    if beta < 0:
        raise ConfigError(f"tolerance must be non-negative, got {beta}")
    values = raster.values.astype(np.float64)
    distance = np.abs(values - np.float64(np.float32(raster.drop_value)))
    return DropIndicator(measured=distance > beta * NORMALIZED_RANGE)


def apply_tolerance(raster: RasterMap, beta: float) -> RasterMap:
    """Copy of ``raster`` with every thresholded pixel set exactly to the drop value."""
    indicator = drop_threshold(raster, beta)
    values = np.where(indicator.measured, raster.values, np.float32(raster.drop_value))
    return raster.with_values(values)


def rasters_to_clouds(
    rasters: Sequence[RasterMap], table: AngleTable, beta: float = 0.0
) -> List[PointCloud]:
    """Back-project rasters after thresholding; rasters with no points left are skipped."""
    clouds = []
    for raster in rasters:
        cloud = raster_to_points(apply_tolerance(raster, beta), table)
        if len(cloud):
            clouds.append(cloud)
    skipped = len(rasters) - len(clouds)
    if skipped:
        logger.warning("%d raster(s) had no measured pixels at beta=%g", skipped, beta)
    return clouds


def weighted_score(report: MetricReport, weights: Optional[Mapping[str, float]] = None) -> float:
    """10 * JSD - COV + 100 * MMD + 1-NNA by default; lower is better."""
    weights = weights or SCORE_WEIGHTS
    return float(sum(weight * getattr(report, name).value for name, weight in weights.items()))


def candidate_betas(config: ToleranceConfig) -> np.ndarray:
    """``config.trials`` log-uniform draws over [lower, upper]."""
    rng = np.random.default_rng(config.seed)
    low, high = math.log(config.lower), math.log(config.upper)
    return np.exp(rng.uniform(low, high, config.trials))


def score_tolerance(
    beta: float,
    samples: Sequence[RasterMap],
    reference: Sequence[PointCloud],
    table: AngleTable,
    config: ToleranceConfig,
    threads: int = 1,
) -> Tuple[float, Optional[MetricReport]]:
    """Weighted score of the samples thresholded at ``beta``; inf when nothing survives."""
    clouds = rasters_to_clouds(samples, table, beta)
    if not clouds:
        return math.inf, None
    eval_config = EvalConfig(
        clouds=max(len(clouds), len(reference)),
        points=config.points,
        repeats=1,
        seed=config.seed,
        threads=threads,
    )
    report = evaluate_sets(reference, clouds, eval_config)
    return weighted_score(report, config.weights), report


def tune_tolerance(
    samples: Sequence[RasterMap],
    reference: Sequence[PointCloud],
    table: AngleTable,
    config: Optional[ToleranceConfig] = None,
    threads: int = 1,
    show_progress: bool = False,
) -> ToleranceResult:
    """Random search for the tolerance minimizing the weighted 3D score."""
    config = config or ToleranceConfig()
    if len(reference) < 2 or any(len(cloud) == 0 for cloud in reference):
        raise ConfigError("tolerance search needs at least two non-empty reference clouds")
    if not samples:
        raise ConfigError("tolerance search needs model samples")

    trials: List[ToleranceTrial] = []
    progress = Progress(
        TextColumn("[bold]tune-tol"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        console=console,
        disable=not show_progress,
    )
    with progress:
        task = progress.add_task("tune", total=config.trials)
        for beta in candidate_betas(config):
            score, _ = score_tolerance(float(beta), samples, reference, table, config, threads)
            trials.append(ToleranceTrial(beta=float(beta), score=score))
            logger.debug("beta %.5f -> score %.5f", beta, score)
            progress.advance(task)

    best = min(trials, key=lambda trial: trial.score)
    if not math.isfinite(best.score):
        raise ConfigError("every tolerance candidate erased all points")
    logger.info("best tolerance %.5f (score %.5f)", best.beta, best.score)
    return ToleranceResult(beta=best.beta, score=best.score, trials=trials)
