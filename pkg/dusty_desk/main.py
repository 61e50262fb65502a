"""Main CLI entry point for dusty-desk."""

import csv
import functools
import io
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import build_config, make_rng
from .console import configure_logging
from .constants import CORRUPTION_KINDS, MANIFEST_NAME
from .errors import ConfigError, DustyError, FormatError
from .inversion import nearest_neighbor_baseline, reconstruct_corrupted
from .inversion import corrupt as corrupt_raster
from .lidar import default_angle_table, stack_rasters, synth_dataset
from .metrics import depth_errors, evaluate_sets
from .models import (
    CorruptionSpec,
    EvalConfig,
    GenerateConfig,
    InversionConfig,
    MetricReport,
    PointCloud,
    RasterMap,
    RunManifest,
    SynthConfig,
    ToleranceConfig,
    TrainConfig,
)
from .parser import load_checkpoint, load_clouds, load_manifest, load_rasters
from .sampling import synthesize
from .tensor import no_grad
from .tolerance import apply_tolerance, rasters_to_clouds, tune_tolerance
from .trainer import Trainer, load_generator, sampler_for
from .writer import (
    probability_to_image,
    raster_to_image,
    save_png_grid,
    save_raster,
    save_raster_batch,
    write_json,
    write_manifest,
    write_ply,
)


class DustyGroup(click.Group):
    """Command group that turns library errors into documented exit codes."""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except DustyError as exc:
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(exc.exit_code)
        except ValidationError as exc:
            click.echo(f"Error: invalid configuration: {exc}", err=True)
            ctx.exit(ConfigError.exit_code)
        except OSError as exc:
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(FormatError.exit_code)


def common_options(command: Callable[..., None]) -> Callable[..., None]:
    """--config, --seed, --out-dir and --threads, shared by every run command."""

    @click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False, path_type=Path),
        default=None,
        help="JSON or key=value config file",
    )
    @click.option("--seed", type=int, default=None, help="Run seed")
    @click.option(
        "--out-dir",
        "-o",
        type=click.Path(file_okay=False, path_type=Path),
        default=Path("outputs"),
        help="Output directory for run artifacts",
    )
    @click.option("--threads", type=click.IntRange(min=1), default=1, help="Worker threads")
    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        return command(*args, **kwargs)

    return wrapper


def _argv(ctx: click.Context) -> List[str]:
    """Rebuild the command line of ``ctx`` from its parsed parameters."""
    args = [ctx.info_name or ""]
    for param in ctx.command.params:
        value = ctx.params.get(param.name or "")
        if value is None:
            continue
        if isinstance(param, click.Option):
            if param.is_flag:
                if param.secondary_opts:
                    args.append(param.opts[0] if value else param.secondary_opts[0])
                elif value:
                    args.append(param.opts[0])
            else:
                args.extend([param.opts[0], str(value)])
        else:
            args.append(str(value))
    return args


class Run:
    """Bookkeeping for one command invocation; writes the manifest on finish."""

    def __init__(self, ctx: click.Context, out_dir: Path):
        self.ctx = ctx
        self.out_dir = out_dir
        self.started = time.monotonic()
        self.started_at = datetime.now(timezone.utc).isoformat()
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        out_dir.mkdir(parents=True, exist_ok=True)

    def output(self, name: str, path: Path) -> Path:
        self.outputs[name] = str(path)
        return path

    def finish(self, config: Dict[str, Any], seed: int) -> RunManifest:
        manifest = RunManifest(
            command=self.ctx.info_name or "",
            argv=_argv(self.ctx),
            config=config,
            seeds={"run": seed},
            version=__version__,
            inputs=self.inputs,
            outputs=self.outputs,
            started_at=self.started_at,
            wall_clock_s=time.monotonic() - self.started,
        )
        write_manifest(manifest, self.out_dir / MANIFEST_NAME)
        return manifest


def _overrides(**values: Any) -> Dict[str, Any]:
    return {key: value for key, value in values.items() if value is not None}


def _raster_shape(rasters: Sequence[RasterMap]) -> Tuple[int, int]:
    if not rasters:
        raise ConfigError("raster file holds no rasters")
    shapes = {raster.shape for raster in rasters}
    if len(shapes) != 1:
        raise ConfigError(f"rasters of mixed shapes: {sorted(shapes)}")
    return rasters[0].shape


def _load_set(
    path: Path, beta: float = 0.0
) -> Tuple[List[PointCloud], Optional[np.ndarray]]:
    """Clouds (and raster values when available) from a PLY directory or raster file."""
    if path.is_dir():
        return load_clouds(path), None
    rasters = load_rasters(path)
    table = default_angle_table(*_raster_shape(rasters))
    clouds = rasters_to_clouds(rasters, table, beta)
    thresholded = [apply_tolerance(raster, beta) for raster in rasters]
    return clouds, stack_rasters(thresholded)


def _pick_raster(path: Path, index: int) -> RasterMap:
    rasters = load_rasters(path)
    if not 0 <= index < len(rasters):
        raise ConfigError(f"{path}: index {index} outside [0, {len(rasters)})")
    return rasters[index]


def _corruption(
    kind: Optional[str],
    drop_probability: Optional[float],
    keep_lines: Optional[int],
    noise_variance: Optional[float],
    noise_space: Optional[str],
    seed: int,
) -> Optional[CorruptionSpec]:
    if kind is None:
        return None
    return CorruptionSpec(
        kind=kind,
        seed=seed,
        **_overrides(
            drop_probability=drop_probability,
            keep_lines=keep_lines,
            noise_variance=noise_variance,
            noise_space=noise_space,
        ),
    )


def _echo_report(report: MetricReport) -> None:
    for name in ("jsd", "cov", "mmd", "one_nna", "swd"):
        value = getattr(report, name)
        if value is not None:
            click.echo(f"{name:>8}: {value.value:.6f} ± {value.std:.6f}")


corruption_options = [
    click.option("--corruption", type=click.Choice(CORRUPTION_KINDS), default=None),
    click.option("--drop-probability", type=float, default=None),
    click.option("--keep-lines", type=int, default=None),
    click.option("--noise-variance", type=float, default=None),
    click.option("--noise-space", type=click.Choice(["normalized", "metric"]), default=None),
]


def with_corruption_options(command: Callable[..., None]) -> Callable[..., None]:
    for option in reversed(corruption_options):
        command = option(command)
    return command


@click.group(cls=DustyGroup)
@click.version_option(__version__, prog_name="dusty-desk")
@click.option("--verbose", "-v", is_flag=True, help="Log per-step details")
def main(verbose: bool) -> None:
    """
    Decomposed LiDAR generation on a desk: synthesize, train, generate,
    evaluate, tune the drop tolerance, invert and corrupt.
    """
    configure_logging(verbose)


@main.command()
@common_options
@click.option("--count", type=int, default=None, help="Number of scenes")
@click.option("--height", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.option("--drop-model", type=click.Choice(["uniform", "depth"]), default=None)
@click.pass_context
def synth(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Path,
    threads: int,
    count: Optional[int],
    height: Optional[int],
    width: Optional[int],
    drop_model: Optional[str],
) -> None:
    """Render a synthetic dataset with ground-truth measurability."""
    overrides = _overrides(count=count, height=height, width=width, seed=seed)
    if drop_model is not None:
        overrides["drop"] = {"kind": drop_model}
    config = build_config(SynthConfig, config_path, overrides)
    run = Run(ctx, out_dir)

    scenes = synth_dataset(
        config.count,
        config.seed,
        (config.height, config.width),
        config.drop,
        config.normalization,
    )
    save_raster_batch([s.dropped for s in scenes], run.output("dataset", out_dir / "dataset.dstb"))
    save_raster_batch([s.clean for s in scenes], run.output("clean", out_dir / "clean.dstb"))
    probability = (
        np.stack([s.drop_probability for s in scenes])
        if scenes
        else np.zeros((0, config.height, config.width))
    )
    np.save(run.output("drop_probability", out_dir / "drop_probability.npy"), probability)
    run.finish(config.model_dump(mode="json"), config.seed)

    rate = float(np.mean([s.dropped.drop_indicator().drop_rate for s in scenes])) if scenes else 0.0
    click.echo(f"Wrote {config.count} scenes to {out_dir} (drop rate {rate:.3f})")


@main.command()
@common_options
@click.option(
    "--data",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="Raster batch file to train on",
)
@click.option("--variant", type=click.Choice(["baseline", "dusty1", "dusty2"]), default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option(
    "--resume",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Checkpoint to continue from",
)
@click.option("--progress/--no-progress", default=True)
@click.pass_context
def train(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Path,
    threads: int,
    data: Path,
    variant: Optional[str],
    iterations: Optional[int],
    batch_size: Optional[int],
    resume: Optional[Path],
    progress: bool,
) -> None:
    """Train a generator/discriminator pair on a raster batch."""
    rasters = load_rasters(data)
    height, width = _raster_shape(rasters)
    run = Run(ctx, out_dir)
    run.inputs["data"] = str(data)

    if resume is not None:
        run.inputs["resume"] = str(resume)
        trainer = Trainer.resume(load_checkpoint(resume), rasters, out_dir)
    else:
        overrides = _overrides(
            variant=variant,
            iterations=iterations,
            batch_size=batch_size,
            seed=seed,
            height=height,
            width=width,
        )
        trainer = Trainer(build_config(TrainConfig, config_path, overrides), rasters, out_dir)

    history = trainer.run(iterations, show_progress=progress)
    run.output("checkpoint", out_dir / "checkpoint.ckpt")
    run.output("losses", out_dir / "losses.csv")
    run.finish(trainer.config.model_dump(mode="json"), trainer.config.seed)

    if history:
        last = history[-1]
        click.echo(
            f"Step {last.step}: loss_d {last.loss_d:.4f}  loss_g {last.loss_g:.4f}  "
            f"fake drop {last.fake_drop_rate:.3f}  real drop {last.real_drop_rate:.3f}"
        )
    click.echo(f"Checkpoint: {out_dir / 'checkpoint.ckpt'}")


@main.command()
@common_options
@click.option(
    "--checkpoint", type=click.Path(dir_okay=False, path_type=Path), required=True
)
@click.option("--count", type=int, default=None)
@click.option(
    "--mode", type=click.Choice(["train", "test", "deterministic"]), default=None
)
@click.option("--tolerance", type=float, default=None, help="Relative drop tolerance")
@click.option("--ply/--no-ply", default=None, help="Also export point clouds")
@click.pass_context
def generate(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Path,
    threads: int,
    checkpoint: Path,
    count: Optional[int],
    mode: Optional[str],
    tolerance: Optional[float],
    ply: Optional[bool],
) -> None:
    """Sample rasters, measurability maps and clouds from a checkpoint."""
    config = build_config(
        GenerateConfig,
        config_path,
        _overrides(count=count, seed=seed, mode=mode, tolerance=tolerance, ply=ply),
    )
    state = load_checkpoint(checkpoint)
    generator = load_generator(state, ema=config.ema)
    sampler = sampler_for(state, config.mode)
    run = Run(ctx, out_dir)
    run.inputs["checkpoint"] = str(checkpoint)

    z = make_rng(config.seed, "latent").standard_normal((config.count, generator.config.latent_dim))
    with no_grad():
        output = generator(z)
        composed, _ = synthesize(output, sampler, make_rng(config.seed, "gumbel"))

    template = RasterMap(values=np.zeros((generator.config.height, generator.config.width)))
    samples = [
        apply_tolerance(template.with_values(values), config.tolerance) for values in composed.data
    ]
    dense = [template.with_values(values) for values in output.dense.data]
    save_raster_batch(samples, run.output("samples", out_dir / "samples.dstb"))
    save_raster_batch(dense, run.output("dense", out_dir / "dense.dstb"))

    pi = output.measurability
    if pi is not None:
        np.save(run.output("measurability", out_dir / "measurability.npy"), pi)
    rows = []
    for i in range(config.count):
        row = [raster_to_image(samples[i].values), raster_to_image(dense[i].values)]
        if pi is not None:
            row.append(probability_to_image(pi[i]))
        rows.append(row)
    save_png_grid(rows, run.output("grid", out_dir / "samples.png"))

    if config.ply:
        table = default_angle_table(generator.config.height, generator.config.width)
        cloud_dir = run.output("clouds", out_dir / "clouds")
        for i, cloud in enumerate(rasters_to_clouds(samples, table)):
            write_ply(cloud, cloud_dir / f"{i:05d}.ply")
    run.finish(config.model_dump(mode="json"), config.seed)
    click.echo(f"Wrote {config.count} samples to {out_dir}")


@main.command()
@common_options
@click.option("--ref", type=click.Path(path_type=Path), required=True, help="Reference set")
@click.option("--gen", type=click.Path(path_type=Path), required=True, help="Generated set")
@click.option("--clouds", type=int, default=None, help="Clouds per set")
@click.option("--points", type=int, default=None, help="Points per cloud after FPS")
@click.option("--repeats", type=int, default=None)
@click.option("--tolerance", type=float, default=0.0, help="Tolerance for generated rasters")
@click.option("--swd/--no-swd", default=True, help="Sliced Wasserstein on raster inputs")
@click.pass_context
def evaluate(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Path,
    threads: int,
    ref: Path,
    gen: Path,
    clouds: Optional[int],
    points: Optional[int],
    repeats: Optional[int],
    tolerance: float,
    swd: bool,
) -> None:
    """Compare two sets with JSD, COV, MMD, 1-NNA and SWD."""
    config = build_config(
        EvalConfig,
        config_path,
        _overrides(clouds=clouds, points=points, repeats=repeats, seed=seed, threads=threads),
    )
    run = Run(ctx, out_dir)
    run.inputs.update(ref=str(ref), gen=str(gen))

    ref_clouds, ref_rasters = _load_set(ref)
    gen_clouds, gen_rasters = _load_set(gen, tolerance)
    use_swd = swd and ref_rasters is not None and gen_rasters is not None
    report = evaluate_sets(
        ref_clouds,
        gen_clouds,
        config,
        ref_rasters if use_swd else None,
        gen_rasters if use_swd else None,
    )

    write_json(report.model_dump(mode="json"), run.output("report", out_dir / "metrics.json"))
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(MetricReport.CSV_FIELDS)
    writer.writerow(report.csv_row())
    csv_path = run.output("csv", out_dir / "metrics.csv")
    csv_path.write_text(buffer.getvalue(), encoding="utf-8")
    run.finish(config.model_dump(mode="json"), config.seed)
    _echo_report(report)


@main.command("tune-tol")
@common_options
@click.option(
    "--samples",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="Raster batch of model samples",
)
@click.option("--ref", type=click.Path(path_type=Path), required=True, help="Validation set")
@click.option("--trials", type=int, default=None)
@click.option("--points", type=int, default=None)
@click.option("--progress/--no-progress", default=True)
@click.pass_context
def tune_tol(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Path,
    threads: int,
    samples: Path,
    ref: Path,
    trials: Optional[int],
    points: Optional[int],
    progress: bool,
) -> None:
    """Search the relative drop tolerance that minimizes the weighted score."""
    config = build_config(
        ToleranceConfig, config_path, _overrides(trials=trials, points=points, seed=seed)
    )
    run = Run(ctx, out_dir)
    run.inputs.update(samples=str(samples), ref=str(ref))

    rasters = load_rasters(samples)
    table = default_angle_table(*_raster_shape(rasters))
    reference, _ = _load_set(ref)
    result = tune_tolerance(rasters, reference, table, config, threads, show_progress=progress)

    write_json(result.model_dump(mode="json"), run.output("result", out_dir / "tolerance.json"))
    run.finish(config.model_dump(mode="json"), config.seed)
    click.echo(f"beta* = {result.beta:.6f} (score {result.score:.6f})")


@main.command()
@common_options
@click.option(
    "--checkpoint", type=click.Path(dir_okay=False, path_type=Path), required=True
)
@click.option(
    "--target", type=click.Path(dir_okay=False, path_type=Path), required=True
)
@click.option("--index", type=int, default=0, help="Raster index inside a batch file")
@with_corruption_options
@click.option("--iterations", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--restarts", type=int, default=None)
@click.option("--constrained/--unconstrained", default=None, help="Latent sphere constraint")
@click.option(
    "--training",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Training batch for the nearest-neighbour baseline",
)
@click.option("--progress/--no-progress", default=True)
@click.pass_context
def invert(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Path,
    threads: int,
    checkpoint: Path,
    target: Path,
    index: int,
    corruption: Optional[str],
    drop_probability: Optional[float],
    keep_lines: Optional[int],
    noise_variance: Optional[float],
    noise_space: Optional[str],
    iterations: Optional[int],
    lr: Optional[float],
    restarts: Optional[int],
    constrained: Optional[bool],
    training: Optional[Path],
    progress: bool,
) -> None:
    """Recover a latent code for a (possibly corrupted) target raster."""
    config = build_config(
        InversionConfig,
        config_path,
        _overrides(
            iterations=iterations,
            learning_rate=lr,
            restarts=restarts,
            constrained=constrained,
            seed=seed,
        ),
    )
    spec = _corruption(
        corruption, drop_probability, keep_lines, noise_variance, noise_space, config.seed
    )
    state = load_checkpoint(checkpoint)
    generator = load_generator(state)
    clean = _pick_raster(target, index)
    run = Run(ctx, out_dir)
    run.inputs.update(checkpoint=str(checkpoint), target=str(target))

    table = default_angle_table(*clean.shape)
    report = reconstruct_corrupted(clean, spec, generator, config, table, show_progress=progress)
    result = report.result

    save_raster(report.target, run.output("target", out_dir / "target.dsty"))
    save_raster(report.corrupted, run.output("corrupted", out_dir / "corrupted.dsty"))
    save_raster(result.dense, run.output("dense", out_dir / "dense.dsty"))
    save_raster(result.composed, run.output("composed", out_dir / "composed.dsty"))
    rows = (clean, report.corrupted, result.dense, result.composed)
    panel = [raster_to_image(r.values) for r in rows]
    save_png_grid([[image] for image in panel], run.output("panel", out_dir / "panel.png"))

    record: Dict[str, Any] = {
        "loss": result.loss,
        "restart": result.restart,
        "losses": result.losses.tolist(),
        "latent_norm": result.latent.norm,
        "depth": report.depth.model_dump(),
        "chamfer": report.chamfer,
        "corruption": spec.model_dump() if spec else None,
    }
    if training is not None:
        run.inputs["training"] = str(training)
        nn_index, nearest = nearest_neighbor_baseline(report.corrupted, load_rasters(training))
        record["nearest_neighbor"] = {
            "index": nn_index,
            "depth": depth_errors(nearest, clean).model_dump(),
        }
    write_json(record, run.output("report", out_dir / "inversion.json"))
    run.finish(config.model_dump(mode="json"), config.seed)

    click.echo(f"masked L1 {result.loss:.5f}  Abs Rel {report.depth.abs_rel:.5f}")


@main.command()
@common_options
@click.option(
    "--input",
    "input_path",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="Raster or raster batch file",
)
@click.option("--kind", type=click.Choice(CORRUPTION_KINDS), default=None)
@click.option("--drop-probability", type=float, default=None)
@click.option("--keep-lines", type=int, default=None)
@click.option("--noise-variance", type=float, default=None)
@click.option("--noise-space", type=click.Choice(["normalized", "metric"]), default=None)
@click.pass_context
def corrupt(
    ctx: click.Context,
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Path,
    threads: int,
    input_path: Path,
    kind: Optional[str],
    drop_probability: Optional[float],
    keep_lines: Optional[int],
    noise_variance: Optional[float],
    noise_space: Optional[str],
) -> None:
    """Apply a corruption regime to every raster of a file."""
    spec = build_config(
        CorruptionSpec,
        config_path,
        _overrides(
            kind=kind,
            drop_probability=drop_probability,
            keep_lines=keep_lines,
            noise_variance=noise_variance,
            noise_space=noise_space,
            seed=seed,
        ),
    )
    run = Run(ctx, out_dir)
    run.inputs["input"] = str(input_path)

    rasters = load_rasters(input_path)
    corrupted = [
        corrupt_raster(raster, spec.model_copy(update={"seed": spec.seed + i}))
        for i, raster in enumerate(rasters)
    ]
    save_raster_batch(corrupted, run.output("corrupted", out_dir / "corrupted.dstb"))
    run.finish(spec.model_dump(mode="json"), spec.seed)

    before = float(np.mean([r.drop_indicator().drop_rate for r in rasters])) if rasters else 0.0
    after = float(np.mean([r.drop_indicator().drop_rate for r in corrupted])) if rasters else 0.0
    click.echo(f"Corrupted {len(rasters)} raster(s): drop rate {before:.3f} -> {after:.3f}")


@main.command()
@click.argument("manifest_path", type=click.Path(dir_okay=False, path_type=Path))
@click.pass_context
def replay(ctx: click.Context, manifest_path: Path) -> None:
    """Re-run the command recorded in a manifest."""
    manifest = load_manifest(manifest_path)
    if not manifest.argv or manifest.argv[0] == "replay":
        raise FormatError(f"{manifest_path}: manifest does not record a replayable command")
    click.echo(f"Replaying: {' '.join(manifest.argv)}")
    code = main.main(args=list(manifest.argv), prog_name="dusty-desk", standalone_mode=False)
    if code:
        ctx.exit(code)


if __name__ == "__main__":
    main()
