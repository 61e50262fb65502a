"""Tests for the training loop, EMA weights and checkpoint resume."""

import csv
import tempfile
from pathlib import Path

import numpy as np
import pytest

from dusty_desk.errors import ConfigError, DimensionError
from dusty_desk.lidar import synth_dataset
from dusty_desk.models import TrainConfig
from dusty_desk.optim import ParamSet
from dusty_desk.parser import load_checkpoint
from dusty_desk.tensor import DTYPE, Tensor
from dusty_desk.trainer import (
    Trainer,
    dataset_array,
    ema_update,
    load_generator,
    sampler_for,
    train,
)
from dusty_desk.writer import save_checkpoint


@pytest.fixture(scope="module")
def dataset():
    """Eight small synthetic scans with drops."""
    return [scene.dropped for scene in synth_dataset(8, seed=0, shape=(16, 64))]


def _config(**overrides):
    values = dict(
        variant="dusty1",
        height=16,
        width=64,
        latent_dim=8,
        base_channels=2,
        batch_size=4,
        iterations=2,
        log_every=1,
        seed=3,
    )
    values.update(overrides)
    return TrainConfig(**values)


def test_train_step_updates_both_networks(dataset):
    """One step changes generator and discriminator weights and reports finite losses."""
    trainer = Trainer(_config(), dataset)
    before_g = trainer.generator.params.state_dict()
    before_d = trainer.discriminator.params.state_dict()

    stats = trainer.train_step()

    assert stats.step == 1
    assert np.isfinite([stats.loss_d, stats.loss_g, stats.r1]).all()
    assert 0.0 <= stats.fake_drop_rate <= 1.0
    assert 0.0 < stats.real_drop_rate < 1.0
    assert any(
        not np.array_equal(before_g[name], t.data) for name, t in trainer.generator.params.items()
    )
    assert any(
        not np.array_equal(before_d[name], t.data)
        for name, t in trainer.discriminator.params.items()
    )
    assert all(t.requires_grad for _, t in trainer.discriminator.params.items())


@pytest.mark.parametrize("variant", ["baseline", "dusty2"])
def test_train_step_other_variants(dataset, variant):
    """The baseline and the multilevel variant train as well."""
    trainer = Trainer(_config(variant=variant), dataset)
    stats = trainer.train_step()
    assert np.isfinite(stats.loss_g)


def test_resume_continues_identically(dataset):
    """Two straight steps equal one step, a checkpoint round trip, then one more."""
    straight = Trainer(_config(), dataset)
    straight.train_step()
    straight.train_step()

    first = Trainer(_config(), dataset)
    first.train_step()
    with tempfile.NamedTemporaryFile(suffix=".ckpt", delete=False) as f:
        temp_path = Path(f.name)

    try:
        save_checkpoint(first.checkpoint(), temp_path)
        resumed = Trainer.resume(load_checkpoint(temp_path), dataset)
    finally:
        temp_path.unlink()

    assert resumed.step == 1
    resumed.train_step()
    for name, tensor in straight.generator.params.items():
        np.testing.assert_allclose(resumed.generator.params[name].data, tensor.data, rtol=1e-6)
    for name, tensor in straight.g_ema.items():
        np.testing.assert_allclose(resumed.g_ema[name].data, tensor.data, rtol=1e-6)


def test_ema_update_rule():
    """Decay 0 copies the live weights, decay 1 freezes the average."""
    live = ParamSet("live", {"w": Tensor(np.full(3, 2.0, dtype=DTYPE))})
    ema = ParamSet("ema", {"w": Tensor(np.zeros(3, dtype=DTYPE))})

    ema_update(ema, live, 0.5)
    np.testing.assert_allclose(ema["w"].data, 1.0)
    ema_update(ema, live, 1.0)
    np.testing.assert_allclose(ema["w"].data, 1.0)
    ema_update(ema, live, 0.0)
    np.testing.assert_allclose(ema["w"].data, 2.0)

    with pytest.raises(ConfigError):
        ema_update(ema, live, 1.5)
    with pytest.raises(ConfigError):
        ema_update(ParamSet("other", {"v": Tensor(np.zeros(3))}), live, 0.5)


@pytest.mark.parametrize("decay", [0.1, 0.5, 0.9, 0.999])
def test_ema_drift_is_bounded_by_discounted_steps(decay):
    """|live - ema| never exceeds sum_k decay^(t-k+1) |step_k| when both start equal."""
    rng = np.random.default_rng(12)
    start = rng.standard_normal(16).astype(DTYPE)
    live = ParamSet("live", {"w": Tensor(start.copy())})
    ema = ParamSet("ema", {"w": Tensor(start.copy())})
    bound = np.zeros(16)

    for _ in range(200):
        previous = live["w"].data.astype(np.float64)
        live["w"].data = (previous + rng.uniform(-0.05, 0.05, 16)).astype(DTYPE)
        step = live["w"].data - previous
        ema_update(ema, live, decay)
        bound = decay * (bound + np.abs(step))
        drift = np.abs(live["w"].data.astype(np.float64) - ema["w"].data)
        assert np.all(drift <= bound + 1e-4)
        assert np.all(drift <= decay / (1.0 - decay) * 0.05 + 1e-4)


def test_dataset_validation(dataset):
    """The dataset must be non-empty and match the configured shape."""
    assert dataset_array(dataset, 16, 64).shape == (8, 16, 64)
    with pytest.raises(ConfigError):
        dataset_array([], 16, 64)
    with pytest.raises(DimensionError):
        dataset_array(dataset, 32, 64)


def test_run_writes_outputs(dataset):
    """A short run logs losses, renders samples and leaves a final checkpoint."""
    with tempfile.TemporaryDirectory() as directory:
        out_dir = Path(directory)
        trainer, history = train(dataset, _config(sample_every=2), out_dir)

        assert [stats.step for stats in history] == [1, 2]
        with open(out_dir / "losses.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["step", "loss_d", "loss_g", "r1", "fake_drop_rate", "real_drop_rate"]
        assert [row[0] for row in rows[1:]] == ["1", "2"]
        assert (out_dir / "samples_000002.png").exists()

        checkpoint = load_checkpoint(out_dir / "checkpoint.ckpt")
        assert checkpoint.step == 2
        generator = load_generator(checkpoint)
        for name, tensor in trainer.g_ema.items():
            np.testing.assert_array_equal(generator.params[name].data, tensor.data)
        live = load_generator(checkpoint, ema=False)
        np.testing.assert_array_equal(
            live.params["g0.weight"].data, trainer.generator.params["g0.weight"].data
        )


def test_sampler_for_checkpoint(dataset):
    """Checkpoints of the multilevel variant sample with the multilevel scheme."""
    trainer = Trainer(_config(variant="dusty2"), dataset)
    sampler = sampler_for(trainer.checkpoint(), "test")
    assert sampler.multilevel
    assert sampler.mode == "test"
