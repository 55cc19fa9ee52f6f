"""Experiment CLI commands: phantom corpora, amortizer training and parameter sweeps."""

import csv
import logging
from pathlib import Path

import numpy as np
from pydantic import ValidationError
import typer
from typer import Argument, Option

from .amortizer import HyperNet, load_checkpoint, save_checkpoint, train_amortized
from .cli_utils import (
    emit_json,
    parse_dims,
    parse_float_list,
    report_errors,
    resolve_config,
)
from .exceptions import ParameterError, PhantomError
from .phantom import PhantomSpec, phantom_series, write_corpus
from .registration import OptimizerConfig
from .sweep import (
    DEFAULT_ALPHAS,
    DEFAULT_REGULARIZERS,
    AmortizedEngine,
    InstanceEngine,
    enumerate_grid,
    parse_heuristic,
    refine_grid,
    run_alpha_sweep,
    run_sweep,
    write_alpha_report,
    write_sweep_report,
)
from .volume_io import load_corpus

experiment_app = typer.Typer(
    name="experiment",
    help="Phantom generation, amortizer training and parameter sweeps",
    no_args_is_help=True,
)

logger = logging.getLogger("elastireg")

CURVE_WINDOW = 50


@report_errors
def phantom_command(
    ctx: typer.Context,
    output_dir: Path = Argument(..., help="Corpus directory to create"),
    count: int = Option(4, "--count", min=1, help="Number of cases"),
    dims: str = Option("64,64", "--dims", help="Grid size, e.g. 64,64 or 32,32,32"),
    spacing: str | None = Option(None, "--spacing", help="Voxel spacing in mm, e.g. 2,1.5"),
    pattern: str = Option("gaussian-blobs", "--pattern", help="gaussian-blobs | checker-smooth"),
    family: str = Option(
        "gaussian-bump", "--family", help="affine | gaussian-bump | rotation"
    ),
    amplitude: float = Option(3.0, "--amplitude", help="Bump amplitude in voxels"),
    angle: float = Option(5.0, "--angle", help="Rotation angle in degrees"),
    blob_sigma: float = Option(2.5, "--blob-sigma", help="Blob width in voxels"),
    allow_folding: bool = Option(False, "--allow-folding"),
    seed: int | None = Option(None, "--seed", help="Seed of the first case"),
    set_options: list[str] | None = Option(None, "--set", help="Override config values"),
):
    """Generate a synthetic corpus with ground-truth fields, labels and keypoints."""
    config = resolve_config(ctx, set_options)
    spacing_values = parse_float_list(spacing, "spacing")
    try:
        base = PhantomSpec(
            dims=parse_dims(dims),
            spacing=tuple(spacing_values) if spacing_values else None,
            pattern=pattern,
            family=family,
            amplitude=amplitude,
            angle_deg=angle,
            blob_sigma=blob_sigma,
            allow_folding=allow_folding,
            seed=config.seed if seed is None else seed,
        )
        base.domain  # noqa: B018
    except ValidationError as e:
        msg = "Invalid phantom settings"
        raise PhantomError(msg, str(e)) from e
    entries = write_corpus(output_dir, phantom_series(base, count))
    emit_json({"corpus": str(output_dir), "cases": [entry.name for entry in entries]})


def _write_curve(path: Path, losses: list[float]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses):
            writer.writerow([step, repr(loss)])


@report_errors
def train_command(
    ctx: typer.Context,
    corpus: Path = Argument(..., help="Corpus directory with cases.yaml"),
    output: Path = Option(Path("model.yaml"), "--output", help="Checkpoint header path"),
    steps: int | None = Option(None, "--steps", help="Training steps"),
    learning_rate: float | None = Option(None, "--lr", help="Adam learning rate"),
    seed: int | None = Option(None, "--seed", help="Initialization and sampling seed"),
    curve: Path | None = Option(None, "--curve", help="CSV file for the training curve"),
    set_options: list[str] | None = Option(None, "--set", help="Override config values"),
):
    """Train the hypernetwork on every pair of a corpus."""
    config = resolve_config(ctx, set_options)
    settings = config.amortizer
    run_seed = config.seed if seed is None else seed
    cases = load_corpus(corpus)
    try:
        optimizer = OptimizerConfig(
            learning_rate=settings.learning_rate if learning_rate is None else learning_rate,
            steps=settings.steps if steps is None else steps,
            seed=run_seed,
            ncc_window=config.ncc_window,
        )
    except ValidationError as e:
        msg = "Invalid training settings"
        raise ParameterError(msg, str(e)) from e

    hyper = HyperNet.create(
        cases[0].domain.ndim,
        seed=run_seed,
        hyper_hidden=settings.hyper_hidden,
        target_hidden=settings.target_hidden,
        max_displacement=settings.max_displacement,
    )
    losses: list[float] = []
    trained = train_amortized(
        [(case.fixed, case.moving) for case in cases],
        hyper,
        optimizer,
        np.random.default_rng(run_seed),
        window=config.ncc_window,
        on_step=lambda _, loss: losses.append(loss),
    )
    save_checkpoint(trained, output)
    if curve is not None:
        _write_curve(curve, losses)
    window = min(CURVE_WINDOW, len(losses))
    emit_json(
        {
            "checkpoint": str(output),
            "steps": len(losses),
            "initial_loss_mean": float(np.mean(losses[:window])),
            "final_loss_mean": float(np.mean(losses[-window:])),
        }
    )


@report_errors
def sweep_command(
    ctx: typer.Context,
    corpus: Path = Argument(..., help="Corpus directory with cases.yaml"),
    resolution: float | None = Option(None, "--resolution", help="Grid resolution"),
    heuristic: list[str] | None = Option(
        None,
        "--heuristic",
        help="max_dice, min_tre, min_folding or weighted:<dice>,<tre>,<neg_jac> (repeatable)",
    ),
    engine: str | None = Option(None, "--engine", help="instance | amortized"),
    model: Path | None = Option(None, "--model", help="Checkpoint for the amortized engine"),
    refine: bool | None = Option(
        None, "--refine/--no-refine", help="Second pass at resolution/5 around the optimum"
    ),
    jobs: int | None = Option(None, "--jobs", min=1, help="Parallel workers"),
    steps: int | None = Option(None, "--steps", help="Optimizer steps (instance engine)"),
    learning_rate: float | None = Option(None, "--lr", help="Adam learning rate"),
    output: Path = Option(Path("sweep_results"), "--output", help="Report directory"),
    set_options: list[str] | None = Option(None, "--set", help="Override config values"),
):
    """Grid search over (lambda_a, mu_a) with heuristic selection."""
    config = resolve_config(ctx, set_options)
    settings = config.sweep
    heuristics = [parse_heuristic(name) for name in (heuristic or settings.heuristics)]
    engine_name = engine or settings.engine
    workers = jobs or settings.jobs

    if engine_name == "amortized":
        if model is None:
            msg = "The amortized engine needs --model"
            raise ParameterError(msg)
        runner = AmortizedEngine(load_checkpoint(model), window=config.ncc_window)
    elif engine_name == "instance":
        runner = InstanceEngine(config.optimizer(steps=steps, learning_rate=learning_rate))
    else:
        msg = f"Unknown engine '{engine_name}' (expected instance or amortized)"
        raise ParameterError(msg)

    cases = load_corpus(corpus)
    grid = enumerate_grid(resolution or settings.resolution)
    report = run_sweep(cases, grid, runner, heuristics, jobs=workers)
    write_sweep_report(report, output)
    summary = {
        "combos": len(grid),
        "records": len(report.records),
        "selected": {k: v.model_dump(mode="json") for k, v in report.selected.items()},
    }

    if (settings.refine if refine is None else refine) and heuristics:
        first = report.selected[heuristics[0].name]
        fine_grid = refine_grid((first.lambda_a, first.mu_a), grid.resolution)
        refined = run_sweep(cases, fine_grid, runner, heuristics, jobs=workers)
        write_sweep_report(refined, output, stem="sweep_refined")
        summary["refined"] = {
            k: v.model_dump(mode="json") for k, v in refined.selected.items()
        }
    emit_json(summary)


@report_errors
def alpha_sweep_command(
    ctx: typer.Context,
    corpus: Path = Argument(..., help="Corpus directory with cases.yaml"),
    alphas: str | None = Option(None, "--alphas", help="Comma-separated alpha values"),
    regularizers: str | None = Option(
        None,
        "--regularizers",
        help="Comma-separated: diffusion, <preset> or <preset>*<factor>",
    ),
    jobs: int | None = Option(None, "--jobs", min=1, help="Parallel workers"),
    steps: int | None = Option(None, "--steps", help="Optimizer steps"),
    learning_rate: float | None = Option(None, "--lr", help="Adam learning rate"),
    output: Path = Option(Path("sweep_results"), "--output", help="Report directory"),
    set_options: list[str] | None = Option(None, "--set", help="Override config values"),
):
    """Alpha-weighted loss with fixed materials versus diffusion, over a range of alpha."""
    config = resolve_config(ctx, set_options)
    alpha_values = parse_float_list(alphas, "alphas") or list(DEFAULT_ALPHAS)
    names = (
        [part.strip() for part in regularizers.split(",") if part.strip()]
        if regularizers
        else list(DEFAULT_REGULARIZERS)
    )
    report = run_alpha_sweep(
        load_corpus(corpus),
        alpha_values,
        names,
        config.optimizer(steps=steps, learning_rate=learning_rate),
        jobs=jobs or config.sweep.jobs,
    )
    write_alpha_report(report, output)
    emit_json({"settings": len(report.records), "output": str(output)})


experiment_app.command("phantom")(phantom_command)
experiment_app.command("train")(train_command)
experiment_app.command("sweep")(sweep_command)
experiment_app.command("alpha-sweep")(alpha_sweep_command)
