"""Tests for the point-cloud and raster distribution metrics."""

import logging
import math

import numpy as np
import pytest

from dusty_desk.errors import ConfigError, DimensionError
from dusty_desk.lidar import default_angle_table, normalize, raster_to_points, synth_dataset
from dusty_desk.metrics import (
    chamfer,
    cov_mmd,
    depth_errors,
    depth_errors_metric,
    distance_matrix,
    evaluate_sets,
    fps,
    fps_indices,
    jsd,
    jsd_histograms,
    laplacian_pyramid,
    one_nna,
    pyr_up,
    squared_distances,
    swd,
    union_matrix,
    usable_levels,
)
from dusty_desk.models import EvalConfig, JSDGrid, MetricReport, PointCloud, RasterMap, SWDConfig


@pytest.fixture(scope="module")
def scenes():
    """Ten synthetic scans with their back-projected clouds."""
    scenes = synth_dataset(10, seed=11, shape=(16, 64))
    table = default_angle_table(16, 64)
    clouds = [raster_to_points(scene.dropped, table) for scene in scenes]
    rasters = np.stack([scene.dropped.values for scene in scenes])
    return clouds, rasters


def test_chamfer_small_example():
    """Mean squared nearest distance in both directions."""
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    assert chamfer(a, b) == pytest.approx(1.0 + 2.5)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a))
    assert chamfer(b, b) == 0.0


def test_chamfer_blocks_match_direct_computation():
    """Clouds larger than one block give the same value as a full matrix."""
    rng = np.random.default_rng(0)
    a = rng.standard_normal((1100, 3))
    b = rng.standard_normal((40, 3))
    full = squared_distances(a, b)
    expected = full.min(axis=1).mean() + full.min(axis=0).mean()
    assert chamfer(a, b) == pytest.approx(expected, rel=1e-12)


def test_chamfer_rejects_empty_and_mismatched():
    """Empty clouds and differing dimensions raise."""
    with pytest.raises(ConfigError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        chamfer(np.zeros((2, 3)), np.zeros((2, 2)))


def test_fps_is_greedy_max_min():
    """Every pick after the first is the farthest from those already chosen."""
    rng = np.random.default_rng(1)
    points = rng.uniform(-10, 10, (200, 3))
    index = fps_indices(points, 12, np.random.default_rng(5))

    assert len(set(index.tolist())) == 12
    for i in range(1, 12):
        chosen = points[index[:i]]
        nearest = squared_distances(points, chosen).min(axis=1)
        nearest[index[:i]] = -np.inf
        assert index[i] == int(np.argmax(nearest))


def test_fps_on_a_line_picks_endpoints():
    """Starting anywhere on a line, the second pick is the far endpoint."""
    points = np.stack([np.arange(11.0), np.zeros(11), np.zeros(11)], axis=1)
    index = fps_indices(points, 3, np.random.default_rng(0))
    start = index[0]
    assert index[1] == (0 if start >= 5 else 10)


def test_fps_keeps_pixel_index():
    """Sampling a back-projected cloud keeps its pixel indices."""
    cloud = PointCloud(points=np.eye(3), pixel_index=[7, 8, 9])
    sampled = fps(cloud, 2, seed=3)
    assert len(sampled) == 2
    assert set(sampled.pixel_index.tolist()) <= {7, 8, 9}
    with pytest.raises(ConfigError):
        fps(cloud, 4)


def test_cov_mmd_example():
    """Coverage counts distinct matched references; MMD averages row minima."""
    matrix = np.array([[0.1, 0.5], [0.2, 0.05], [0.9, 0.8]])
    cov, mmd = cov_mmd(matrix)
    assert cov == pytest.approx(2.0 / 3.0)
    assert mmd == pytest.approx((0.1 + 0.05 + 0.8) / 3.0)


def test_one_nna_separated_and_identical():
    """Separated sets are fully classifiable; identical sets are not at all."""
    ref = [np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])]
    far = [np.array([[10.0, 0.0, 0.0]]), np.array([[11.0, 0.0, 0.0]])]

    rr = distance_matrix(ref, ref)
    rg = distance_matrix(ref, far)
    gg = distance_matrix(far, far)
    assert one_nna(union_matrix(rr, rg, gg), 2) == 1.0

    same = union_matrix(rr, rr, rr)
    assert one_nna(same, 2) == 0.0


def test_one_nna_validates_input():
    """The union matrix must be square with at least two samples."""
    with pytest.raises(DimensionError):
        one_nna(np.zeros((2, 3)), 1)
    with pytest.raises(ConfigError):
        one_nna(np.zeros((1, 1)), 1)


def test_distance_matrix_threads_agree():
    """The threaded matrix equals the sequential one."""
    rng = np.random.default_rng(2)
    rows = [rng.standard_normal((20, 3)) for _ in range(4)]
    cols = [rng.standard_normal((15, 3)) for _ in range(3)]
    single = distance_matrix(rows, cols).values
    threaded = distance_matrix(rows, cols, threads=3).values
    assert single.shape == (4, 3)
    np.testing.assert_array_equal(single, threaded)


def test_jsd_bounds():
    """Identical histograms give 0, disjoint ones ln 2."""
    assert jsd_histograms([1, 2, 3], [2, 4, 6]) == pytest.approx(0.0, abs=1e-12)
    assert jsd_histograms([1, 0], [0, 1]) == pytest.approx(math.log(2))
    with pytest.raises(ConfigError):
        jsd_histograms([0, 0], [1, 1])
    with pytest.raises(DimensionError):
        jsd_histograms([1, 1], [1, 1, 1])


def test_jsd_of_clouds():
    """Disjoint BEV cells give ln 2; points outside the grid are ignored."""
    grid = JSDGrid(bins=10, bound_m=10.0)
    near = [np.array([[1.0, 1.0, 0.0], [50.0, 0.0, 0.0]])]
    other = [np.array([[-5.0, -5.0, 0.0]])]
    assert jsd(near, near, grid) == 0.0
    assert jsd(near, other, grid) == pytest.approx(math.log(2))


def test_laplacian_pyramid_reconstructs():
    """Upsampling and adding the bands back recovers the input."""
    images = np.random.default_rng(3).standard_normal((2, 16, 32))
    pyramid = laplacian_pyramid(images, 3)
    assert [level.shape[-2:] for level in pyramid] == [(16, 32), (8, 16), (4, 8)]
    current = pyramid[-1]
    for band in reversed(pyramid[:-1]):
        current = band + pyr_up(current, band.shape[-2:])
    np.testing.assert_allclose(current, images, atol=1e-10)


def test_swd_identical_sets_is_zero(scenes):
    """The same rasters at the same patch seeds give exactly zero."""
    _, rasters = scenes
    config = SWDConfig(levels=2, patches_per_image=16, projections=8, repeats=1)
    assert swd(rasters, rasters, config) == 0.0


def test_swd_detects_a_shift(scenes):
    """Adding noise makes the distance positive."""
    _, rasters = scenes
    noisy = np.clip(rasters + np.random.default_rng(4).normal(0, 0.2, rasters.shape), -1, 1)
    config = SWDConfig(levels=2, patches_per_image=16, projections=8, repeats=1)
    assert swd(rasters, noisy, config) > 0.0


def test_swd_truncates_levels_with_warning(caplog):
    """Rasters too small for every level lose the coarse ones, with a warning."""
    with caplog.at_level(logging.WARNING, logger="dusty_desk"):
        levels = usable_levels((16, 64), SWDConfig(levels=3, patch_size=7))
    assert levels == 2
    assert "truncated" in caplog.text
    with pytest.raises(ConfigError):
        usable_levels((4, 64), SWDConfig(patch_size=7))


def test_depth_errors_of_a_doubled_prediction():
    """Predicting twice the true depth gives abs_rel 1, rmse_log ln 2 and no delta hits."""
    target = np.array([2.0, 4.0, 8.0])
    report = depth_errors_metric(2.0 * target, target)
    assert report.abs_rel == pytest.approx(1.0)
    assert report.rmse_log == pytest.approx(math.log(2))
    assert report.rmse == pytest.approx(math.sqrt((4 + 16 + 64) / 3))
    assert (report.delta1, report.delta2, report.delta3) == (0.0, 0.0, 0.0)
    assert report.pixels == 3


def test_depth_errors_use_co_measured_pixels():
    """Pixels dropped in either raster are ignored."""
    values = normalize(np.full((2, 4), 10.0)).astype(np.float32)
    target = RasterMap(values=values)
    pred_values = values.copy()
    pred_values[0, 0] = -1.0
    report = depth_errors(RasterMap(values=pred_values), target)
    assert report.pixels == 7
    assert report.abs_rel == pytest.approx(0.0, abs=1e-6)
    assert report.delta1 == 1.0


def test_evaluate_identical_sets(scenes):
    """A set compared with itself: full coverage, zero MMD and JSD, 1-NNA of 0."""
    clouds, _ = scenes
    config = EvalConfig(clouds=6, points=64, repeats=2, seed=1)
    report = evaluate_sets(clouds, clouds, config)

    assert report.cov.value == 1.0
    assert report.mmd.value == 0.0
    assert report.jsd.value == pytest.approx(0.0, abs=1e-12)
    assert report.one_nna.value == 0.0
    assert report.n_ref == 6
    assert report.repeats == 2
    assert report.swd is None


def test_evaluate_different_sets(scenes):
    """Metrics of two different halves stay in range and include SWD when rasters are given."""
    clouds, rasters = scenes
    config = EvalConfig(
        clouds=5,
        points=48,
        repeats=2,
        swd=SWDConfig(levels=2, patches_per_image=8, projections=4, repeats=1),
    )
    report = evaluate_sets(clouds[:5], clouds[5:], config, rasters[:5], rasters[5:])

    assert 0.0 < report.jsd.value <= math.log(2)
    assert 0.0 < report.cov.value <= 1.0
    assert report.mmd.value > 0.0
    assert 0.0 <= report.one_nna.value <= 1.0
    assert report.swd is not None and report.swd.value > 0.0
    assert report.cov.std >= 0.0

    restored = MetricReport.from_csv_row(report.csv_row())
    assert restored == report


def test_evaluate_is_deterministic(scenes):
    """The same seed gives the same report."""
    clouds, _ = scenes
    config = EvalConfig(clouds=4, points=32, repeats=1, seed=9)
    assert evaluate_sets(clouds[:4], clouds[4:8], config) == evaluate_sets(
        clouds[:4], clouds[4:8], config
    )
