"""Alternating adversarial training, EMA weights, checkpoints and sample grids."""

import csv
import logging
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from rich.progress import BarColumn, Progress, TextColumn, TimeRemainingColumn

from . import __version__
from .augment import diff_augment
from .config import make_rng, seed_streams
from .console import console
from .constants import DROP_VALUE
from .errors import ConfigError, DimensionError, NumericError
from .losses import loss_d, loss_g
from .models import Checkpoint, RasterMap, SamplerConfig, TrainConfig
from .networks import Discriminator, Generator, discriminator_layers, generator_layers, init_params
from .optim import AdamState, ParamSet, adam_step
from .sampling import synthesize
from .tensor import DTYPE, Tensor, no_grad
from .writer import probability_to_image, raster_to_image, save_checkpoint, save_png_grid

logger = logging.getLogger(__name__)

LOSS_FIELDS = ("step", "loss_d", "loss_g", "r1", "fake_drop_rate", "real_drop_rate")
SAMPLE_COUNT = 4


class StepStats(NamedTuple):
    step: int
    loss_d: float
    loss_g: float
    r1: float
    fake_drop_rate: float
    real_drop_rate: float


def ema_update(ema: ParamSet, live: ParamSet, decay: float) -> ParamSet:
    """ema <- decay * ema + (1 - decay) * live, per parameter, in place."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1], got {decay}")
    if ema.names() != live.names():
        raise ConfigError(f"EMA parameters {ema.names()} do not match {live.names()}")
    for name, tensor in ema.items():
        source = live[name].data
        if decay == 0.0:
            tensor.data = source.copy()
        elif decay < 1.0:
            tensor.data = (decay * tensor.data + (1.0 - decay) * source).astype(DTYPE)
    return ema


def dataset_array(
    dataset: Union[np.ndarray, Sequence[RasterMap]], height: int, width: int
) -> np.ndarray:
    """N x H x W float32 training array from rasters or an existing array."""
    if isinstance(dataset, np.ndarray):
        data = dataset.astype(DTYPE)
    else:
        data = np.stack([r.values for r in dataset]).astype(DTYPE) if dataset else np.zeros(0)
    if data.size == 0:
        raise ConfigError("training dataset is empty")
    if data.ndim != 3 or data.shape[1:] != (height, width):
        raise DimensionError(f"dataset shape {data.shape[1:]} does not match {height}x{width}")
    return data


class Trainer:
    """Owns both networks, their optimizers, the EMA copy and the random streams."""

    def __init__(
        self,
        config: TrainConfig,
        dataset: Union[np.ndarray, Sequence[RasterMap]],
        out_dir: Optional[Path] = None,
    ):
        self.config = config
        self.data = dataset_array(dataset, config.height, config.width)
        self.out_dir = Path(out_dir) if out_dir else None
        self.step = 0

        self.rngs = seed_streams(config.seed)
        init_rng = self.rngs["init"]
        network = config.network
        self.generator = Generator(
            network, init_params("generator", generator_layers(network), init_rng)
        )
        self.discriminator = Discriminator(
            network, init_params("discriminator", discriminator_layers(network), init_rng)
        )
        self.g_ema = self.generator.params.copy("generator_ema")
        self.adam_g = AdamState(self.generator.params, lr=config.learning_rate)
        self.adam_d = AdamState(self.discriminator.params, lr=config.learning_rate)
        self.sampler = config.sampler("train")
        self.sample_latents = make_rng(config.seed, "samples").standard_normal(
            (SAMPLE_COUNT, config.latent_dim)
        )

    # ------------------------------------------------------------------
    # One iteration
    # ------------------------------------------------------------------

    def _augment(self, x: Tensor) -> Tensor:
        return diff_augment(x, self.config.augment, self.rngs["augment"])

    @property
    def augment(self) -> Optional[Callable[[Tensor], Tensor]]:
        return self._augment if self.config.augment.enabled else None

    def _real_batch(self) -> Tuple[Tensor, float]:
        index = self.rngs["data"].integers(0, self.data.shape[0], self.config.batch_size)
        batch = self.data[index]
        drop_rate = float(np.mean(batch == DTYPE(DROP_VALUE)))
        return Tensor(batch[:, None]), drop_rate

    def _latents(self) -> np.ndarray:
        return self.rngs["latent"].standard_normal((self.config.batch_size, self.config.latent_dim))

    def _fake(self, z: np.ndarray) -> Tuple[Tensor, float]:
        output = self.generator(z)
        fake, mask = synthesize(output, self.sampler, self.rngs["gumbel"])
        if mask is not None:
            drop_rate = mask.drop_rate
        else:
            drop_rate = float(np.mean(fake.data == DTYPE(DROP_VALUE)))
        return fake.reshape(fake.shape[0], 1, fake.shape[1], fake.shape[2]), drop_rate

    def train_step(self) -> StepStats:
        """One discriminator update followed by one generator update."""
        real, real_drop_rate = self._real_batch()

        with no_grad():
            fake, _ = self._fake(self._latents())
        d_loss = loss_d(
            self.discriminator, real, fake.detach(), self.config.r1_gamma, self.augment
        )
        self.discriminator.params.zero_grad()
        d_loss.total.backward()
        adam_step(self.discriminator.params, self.discriminator.params.grads(), self.adam_d)

        with self.discriminator.params.frozen():
            fake, fake_drop_rate = self._fake(self._latents())
            g_loss = loss_g(self.discriminator, fake, self.augment)
            self.generator.params.zero_grad()
            g_loss.backward()
        adam_step(self.generator.params, self.generator.params.grads(), self.adam_g)

        ema_update(self.g_ema, self.generator.params, self.config.ema_decay)
        self.step += 1
        stats = StepStats(
            step=self.step,
            loss_d=d_loss.adversarial.item(),
            loss_g=g_loss.item(),
            r1=d_loss.r1.item(),
            fake_drop_rate=fake_drop_rate,
            real_drop_rate=real_drop_rate,
        )
        if not all(np.isfinite(value) for value in stats[1:4]):
            raise NumericError(f"non-finite loss at step {self.step}: {stats}")
        return stats

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors: Dict[str, np.ndarray] = {}
        for prefix, params in (
            ("G", self.generator.params),
            ("D", self.discriminator.params),
            ("G_ema", self.g_ema),
        ):
            for name, value in params.state_dict().items():
                tensors[f"{prefix}.{name}"] = value
        for prefix, state in (("adam_g", self.adam_g), ("adam_d", self.adam_d)):
            for name, value in state.buffers().items():
                tensors[f"{prefix}.{name}"] = value
        header = {
            "step": self.step,
            "version": __version__,
            "config": self.config.model_dump(mode="json"),
            "adam_g": self.adam_g.hyperparameters(),
            "adam_d": self.adam_d.hyperparameters(),
            "rng": {name: rng.bit_generator.state for name, rng in self.rngs.items()},
        }
        return Checkpoint(header=header, tensors=tensors)

    def load_checkpoint(self, checkpoint: Checkpoint) -> None:
        """Restore weights, optimizer moments, RNG states and the step counter."""
        self.generator.params.load_state_dict(checkpoint.group("G"))
        self.discriminator.params.load_state_dict(checkpoint.group("D"))
        self.g_ema.load_state_dict(checkpoint.group("G_ema"))
        self.adam_g.load(checkpoint.header["adam_g"], checkpoint.group("adam_g"))
        self.adam_d.load(checkpoint.header["adam_d"], checkpoint.group("adam_d"))
        for name, state in checkpoint.header.get("rng", {}).items():
            if name in self.rngs:
                self.rngs[name].bit_generator.state = state
        self.step = checkpoint.step

    @classmethod
    def resume(
        cls,
        checkpoint: Checkpoint,
        dataset: Union[np.ndarray, Sequence[RasterMap]],
        out_dir: Optional[Path] = None,
    ) -> "Trainer":
        config = TrainConfig.model_validate(checkpoint.header["config"])
        trainer = cls(config, dataset, out_dir)
        trainer.load_checkpoint(checkpoint)
        logger.warning("resuming training at step %d", trainer.step)
        return trainer

    def save(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        path = self.out_dir / name
        save_checkpoint(self.checkpoint(), path)
        logger.info("checkpoint written to %s (step %d)", path, self.step)
        return path

    # ------------------------------------------------------------------
    # Samples and logs
    # ------------------------------------------------------------------

    def sample_grid(self, path: Path) -> None:
        """One row per fixed latent: composed, dense, measurability (EMA weights)."""
        generator = Generator(self.config.network, self.g_ema)
        rows = []
        with no_grad():
            output = generator(self.sample_latents)
            composed, _ = synthesize(
                output, self.config.sampler("test"), make_rng(self.config.seed, "sample-masks")
            )
        pi = output.measurability
        for i in range(SAMPLE_COUNT):
            row = [raster_to_image(composed.data[i]), raster_to_image(output.dense.data[i])]
            if pi is not None:
                row.append(probability_to_image(pi[i]))
            rows.append(row)
        save_png_grid(rows, path)

    def _append_log(self, stats: StepStats) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "losses.csv"
        fresh = not path.exists()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            if fresh:
                writer.writerow(LOSS_FIELDS)
            writer.writerow([stats.step] + [f"{value:.6g}" for value in stats[1:]])

    def run(self, iterations: Optional[int] = None, show_progress: bool = True) -> List[StepStats]:
        """Train until ``iterations`` total steps (default: the config's count)."""
        target = iterations if iterations is not None else self.config.iterations
        history: List[StepStats] = []
        progress = Progress(
            TextColumn("[bold]train"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TimeRemainingColumn(),
            console=console,
            disable=not show_progress,
        )
        with progress:
            task = progress.add_task("train", total=target, completed=self.step)
            while self.step < target:
                try:
                    stats = self.train_step()
                except NumericError:
                    path = self.save("diagnostic.ckpt")
                    logger.error(
                        "numeric failure at step %d; diagnostic checkpoint %s", self.step, path
                    )
                    raise
                history.append(stats)
                progress.update(task, completed=self.step)
                if self.step % self.config.log_every == 0 or self.step == target:
                    self._append_log(stats)
                    logger.debug(
                        "step %d  D %.4f  G %.4f  R1 %.4f  drop fake %.3f real %.3f", *stats
                    )
                if self.out_dir is not None and self.step % self.config.sample_every == 0:
                    self.sample_grid(self.out_dir / f"samples_{self.step:06d}.png")
                if self.step % self.config.checkpoint_every == 0:
                    self.save(f"checkpoint_{self.step:06d}.ckpt")
        self.save("checkpoint.ckpt")
        return history


def train(
    dataset: Union[np.ndarray, Sequence[RasterMap]],
    config: TrainConfig,
    out_dir: Optional[Path] = None,
    show_progress: bool = False,
) -> Tuple[Trainer, List[StepStats]]:
    """Build a trainer and run it for ``config.iterations`` steps."""
    trainer = Trainer(config, dataset, out_dir)
    history = trainer.run(show_progress=show_progress)
    return trainer, history


def load_generator(checkpoint: Checkpoint, ema: bool = True) -> Generator:
    """Generator from a checkpoint; EMA weights unless ``ema`` is False."""
    config = TrainConfig.model_validate(checkpoint.header["config"])
    network = config.network
    params = init_params("generator", generator_layers(network), np.random.default_rng(0))
    params.load_state_dict(checkpoint.group("G_ema" if ema else "G"))
    return Generator(network, params)


def sampler_for(checkpoint: Checkpoint, mode: str = "test") -> SamplerConfig:
    config = TrainConfig.model_validate(checkpoint.header["config"])
    return config.sampler(mode)  # type: ignore[arg-type]
