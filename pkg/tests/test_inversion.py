"""Tests for latent inversion and the corruption regimes."""

import math

import numpy as np
import pytest

from dusty_desk.errors import ConfigError, DimensionError
from dusty_desk.inversion import (
    corrupt,
    corruption_presets,
    invert,
    invert_batch,
    kept_lines,
    masked_l1,
    nearest_neighbor_baseline,
    project_to_sphere,
    reconstruct_corrupted,
)
from dusty_desk.lidar import default_angle_table, synth_dataset
from dusty_desk.models import CorruptionSpec, InversionConfig, NetworkConfig, RasterMap
from dusty_desk.networks import Generator
from dusty_desk.tensor import DTYPE, Tensor

LATENT = 6


@pytest.fixture(scope="module")
def scenes():
    """Four synthetic scans at the network's resolution."""
    return synth_dataset(4, seed=5, shape=(16, 64))


@pytest.fixture
def generator():
    """A small untrained dusty1 generator."""
    config = NetworkConfig(variant="dusty1", height=16, width=64, latent_dim=8, base_channels=2)
    return Generator(config, rng=np.random.default_rng(0))


def _linear_model():
    """dense(z) = tanh(A z) on a 4 x 8 raster, with a target drawn from the model."""
    rng = np.random.default_rng(10)
    weights = Tensor((rng.standard_normal((4, 8, LATENT)) * 0.3).astype(DTYPE))

    def dense(z):
        return (weights * z.reshape(1, 1, LATENT)).sum(axis=2).tanh()

    truth = project_to_sphere(rng.standard_normal(LATENT))
    values = dense(Tensor(truth.astype(DTYPE))).data.copy()
    values[0, :3] = -1.0
    return dense, RasterMap(values=values)


def test_project_to_sphere():
    """Projected codes have norm sqrt(d)."""
    z = project_to_sphere(np.array([3.0, 4.0, 0.0, 0.0]))
    assert np.linalg.norm(z) == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        project_to_sphere(np.zeros(3))


def test_noise_schedule_endpoints():
    """Noise std starts at sqrt(noise_scale) and is exactly zero on the last step."""
    config = InversionConfig(iterations=5)
    assert config.noise_std(0) == pytest.approx(math.sqrt(0.05))
    assert config.noise_std(4) == 0.0
    assert InversionConfig(iterations=1).noise_std(0) == 0.0


@pytest.mark.parametrize("iterations", [1, 2, 7, 500])
def test_noise_schedule_never_increases(iterations):
    """The noise std is non-increasing over the whole run."""
    config = InversionConfig(iterations=iterations, noise_scale=0.3)
    stds = np.array([config.noise_std(i) for i in range(iterations)])
    assert np.all(np.diff(stds) <= 0.0)
    assert np.all(stds >= 0.0)
    assert stds[-1] == 0.0


def test_loss_ignores_output_at_dropped_pixels():
    """Changing the output where the target is dropped leaves the loss unchanged."""
    target = RasterMap(values=np.array([[0.5, -1.0], [0.0, -1.0]]))
    a = Tensor(np.array([[0.4, 0.9], [0.1, -0.3]], dtype=DTYPE))
    b = Tensor(np.array([[0.4, -0.7], [0.1, 0.8]], dtype=DTYPE))
    assert masked_l1(a, target).item() == masked_l1(b, target).item()
    assert masked_l1(a, target).item() == pytest.approx(0.1)


def test_target_without_measured_pixels_raises(generator):
    """An all-drop target cannot be inverted."""
    with pytest.raises(ConfigError):
        invert(RasterMap(values=np.full((16, 64), -1.0)), generator)


def test_invert_recovers_a_linear_model():
    """Noisy projected Adam fits a target produced by the model itself."""
    dense, target = _linear_model()
    config = InversionConfig(iterations=300, learning_rate=0.1, seed=2)
    result = invert(target, dense, config, latent_dim=LATENT)

    assert result.losses.shape == (300,)
    assert result.loss == pytest.approx(result.losses.min())
    assert result.loss < 0.5 * result.losses[0]
    assert result.latent.norm == pytest.approx(math.sqrt(LATENT))
    np.testing.assert_array_equal(result.best_curve, np.minimum.accumulate(result.losses))
    assert np.all(result.dense.values > -1.0)
    assert result.norms.shape == (300,)
    assert np.all(np.abs(result.norms - math.sqrt(LATENT)) <= 1e-6)


def test_unconstrained_latent_leaves_the_sphere():
    """Without the constraint the latent norm is free."""
    dense, target = _linear_model()
    config = InversionConfig(iterations=20, constrained=False, noise_scale=0.0)
    result = invert(target, dense, config, latent_dim=LATENT)
    assert not result.latent.constrained
    assert result.latent.norm != pytest.approx(math.sqrt(LATENT))
    assert np.ptp(result.norms) > 0


def test_plain_function_needs_latent_dim():
    """A bare dense function carries no latent size."""
    dense, target = _linear_model()
    with pytest.raises(ConfigError):
        invert(target, dense, InversionConfig(iterations=1))
    with pytest.raises(DimensionError):
        invert(target, dense, InversionConfig(iterations=1), latent_dim=LATENT, initial=np.ones(3))


def test_restarts_keep_the_best():
    """With several restarts the reported loss is the lowest over all of them."""
    dense, target = _linear_model()
    single = invert(target, dense, InversionConfig(iterations=10, seed=3), latent_dim=LATENT)
    config = InversionConfig(iterations=10, seed=3, restarts=2)
    both = invert(target, dense, config, latent_dim=LATENT)
    assert both.restart in (0, 1)
    assert both.loss <= single.loss


def test_invert_generator(generator, scenes):
    """Inverting a real generator yields dense and composed rasters and leaves weights trainable."""
    target = scenes[0].dropped
    before = generator.params.state_dict()
    config = InversionConfig(iterations=3, seed=1)
    result = invert(target, generator, config)

    assert result.latent.dim == 8
    assert result.dense.shape == (16, 64)
    dense_kept = result.composed.drop_indicator().measured
    np.testing.assert_array_equal(
        result.composed.values[dense_kept], result.dense.values[dense_kept]
    )
    assert all(t.requires_grad for _, t in generator.params.items())
    for name, value in before.items():
        np.testing.assert_array_equal(generator.params[name].data, value)

    again = invert(target, generator, config)
    np.testing.assert_array_equal(again.latent.values, result.latent.values)


def test_invert_generator_shape_mismatch(generator):
    """The target must match the generator's raster shape."""
    with pytest.raises(DimensionError):
        invert(RasterMap(values=np.zeros((16, 32))), generator)


def test_invert_batch(generator, scenes):
    """Each target gets its own result."""
    targets = [scene.dropped for scene in scenes[:2]]
    results = invert_batch(targets, generator, InversionConfig(iterations=2))
    assert len(results) == 2


def test_random_drop_regimes(scenes):
    """p = 0 keeps the raster, p = 1 drops everything, and drops are never undone."""
    raster = scenes[0].dropped
    keep = corrupt(raster, CorruptionSpec(kind="random-drop", drop_probability=0.0))
    np.testing.assert_array_equal(keep.values, raster.values)

    everything = corrupt(raster, CorruptionSpec(kind="random-drop", drop_probability=1.0))
    assert everything.drop_indicator().measured_count == 0

    spec = CorruptionSpec(kind="random-drop", drop_probability=0.5, seed=3)
    first, second = corrupt(raster, spec), corrupt(raster, spec)
    np.testing.assert_array_equal(first.values, second.values)
    originally_dropped = raster.drop_indicator().dropped
    assert np.all(first.drop_indicator().dropped[originally_dropped])
    measured = first.drop_indicator().measured
    np.testing.assert_array_equal(first.values[measured], raster.values[measured])


def test_kept_lines():
    """Rows are evenly spaced from the top."""
    np.testing.assert_array_equal(kept_lines(16, 4), [0, 4, 8, 12])
    np.testing.assert_array_equal(kept_lines(64, 16), np.arange(0, 64, 4))
    np.testing.assert_array_equal(kept_lines(5, 5), np.arange(5))
    with pytest.raises(ConfigError):
        kept_lines(16, 0)
    with pytest.raises(ConfigError):
        kept_lines(16, 17)


def test_keep_lines_corruption(scenes):
    """Only the kept rows survive, unchanged."""
    raster = scenes[1].clean
    out = corrupt(raster, CorruptionSpec(kind="keep-lines", keep_lines=4))
    kept = kept_lines(16, 4)
    np.testing.assert_array_equal(out.values[kept], raster.values[kept])
    others = np.setdiff1d(np.arange(16), kept)
    assert np.all(out.values[others] == -1.0)
    with pytest.raises(ConfigError):
        corrupt(raster, CorruptionSpec(kind="keep-lines", keep_lines=32))


@pytest.mark.parametrize("space", ["normalized", "metric"])
def test_noise_keeps_the_drop_pattern(scenes, space):
    """Noise moves measured values but never creates or removes drops."""
    raster = scenes[2].dropped
    spec = CorruptionSpec(kind="noise", noise_variance=0.05, noise_space=space, seed=1)
    out = corrupt(raster, spec)
    np.testing.assert_array_equal(
        out.drop_indicator().measured, raster.drop_indicator().measured
    )
    measured = raster.drop_indicator().measured
    assert not np.array_equal(out.values[measured], raster.values[measured])
    assert out.values.min() >= -1.0 and out.values.max() <= 1.0


def test_zero_noise_is_identity(scenes):
    """Zero variance leaves the raster unchanged."""
    raster = scenes[2].dropped
    out = corrupt(raster, CorruptionSpec(kind="noise", noise_variance=0.0))
    np.testing.assert_array_equal(out.values, raster.values)


def test_reconstruct_corrupted(generator, scenes):
    """The report scores the dense output against the clean target."""
    target = scenes[3].dropped
    report = reconstruct_corrupted(
        target,
        CorruptionSpec(kind="random-drop", drop_probability=0.5),
        generator,
        InversionConfig(iterations=2),
        table=default_angle_table(16, 64),
    )
    assert report.depth.pixels == target.drop_indicator().measured_count
    assert report.chamfer is not None and report.chamfer > 0
    assert report.corrupted.drop_indicator().measured_count < target.drop_indicator().measured_count


def test_nearest_neighbor_baseline(scenes):
    """A corrupted copy of a training raster is matched back to it."""
    training = [scene.clean for scene in scenes]
    corrupted = corrupt(training[2], CorruptionSpec(kind="random-drop", drop_probability=0.8))
    index, match = nearest_neighbor_baseline(corrupted, training)
    assert index == 2
    assert match is training[2]
    with pytest.raises(ConfigError):
        nearest_neighbor_baseline(corrupted, [])


@pytest.mark.parametrize("height,lines", [(64, 8), (16, 2), (4, 1)])
def test_corruption_presets(height, lines):
    """90% random drop, one line in eight and N(0, 0.01) noise, scaled to the raster height."""
    drop, keep, noise = corruption_presets(height, seed=4)
    assert (drop.kind, drop.drop_probability) == ("random-drop", 0.9)
    assert (keep.kind, keep.keep_lines) == ("keep-lines", lines)
    assert (noise.kind, noise.noise_variance) == ("noise", 0.01)
    assert {drop.seed, keep.seed, noise.seed} == {4}
