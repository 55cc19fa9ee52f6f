"""Core CLI commands: register one pair and evaluate a saved field."""

import json
import logging
from pathlib import Path

import typer
from typer import Argument, Option

from .cli_utils import emit_json, report_errors, resolve_config, select_case
from .energy import AlphaWeighting, ElasticityParams
from .exceptions import ParameterError
from .metrics import evaluate_field
from .registration import register_pair
from .sweep import resolve_regularizer
from .volume_io import load_field, save_field

core_app = typer.Typer(
    name="core",
    help="Single-pair registration and evaluation commands",
    no_args_is_help=True,
)

logger = logging.getLogger("elastireg")


def _weighting(
    lambda_a: float | None, mu_a: float | None, alpha: float | None, regularizer: str
) -> ElasticityParams | AlphaWeighting:
    if alpha is not None and (lambda_a is not None or mu_a is not None):
        msg = "Use either --lambda-a/--mu-a or --alpha, not both"
        raise ParameterError(msg)
    try:
        if alpha is not None:
            return AlphaWeighting(alpha=alpha, elasticity=resolve_regularizer(regularizer))
        return ElasticityParams(lambda_a=lambda_a or 0.0, mu_a=mu_a or 0.0)
    except ValueError as e:
        msg = "Invalid loss weights: need 0 <= alpha <= 1, or lambda_a, mu_a >= 0 with sum <= 1"
        raise ParameterError(msg, str(e)) from e


@report_errors
def register_command(
    ctx: typer.Context,
    corpus: Path | None = Option(None, "--corpus", help="Corpus directory with cases.yaml"),
    case: str | None = Option(None, "--case", help="Case name within the corpus"),
    fixed: Path | None = Option(None, "--fixed", help="Fixed image RVOL header"),
    moving: Path | None = Option(None, "--moving", help="Moving image RVOL header"),
    fixed_labels: Path | None = Option(None, "--fixed-labels"),
    moving_labels: Path | None = Option(None, "--moving-labels"),
    fixed_keypoints: Path | None = Option(None, "--fixed-keypoints"),
    moving_keypoints: Path | None = Option(None, "--moving-keypoints"),
    lambda_a: float | None = Option(None, "--lambda-a", help="Absorbed-weight lambda"),
    mu_a: float | None = Option(None, "--mu-a", help="Absorbed-weight mu"),
    alpha: float | None = Option(
        None, "--alpha", help="Use the alpha-weighted loss instead of lambda_a/mu_a"
    ),
    regularizer: str = Option(
        "diffusion",
        "--regularizer",
        help="With --alpha: 'diffusion', a preset name, or '<preset>*<factor>'",
    ),
    steps: int | None = Option(None, "--steps", help="Optimizer steps per level"),
    learning_rate: float | None = Option(None, "--lr", help="Adam learning rate"),
    levels: int | None = Option(None, "--levels", help="Pyramid levels"),
    seed: int | None = Option(None, "--seed", help="Run seed"),
    output: Path | None = Option(
        None, "--output", help="Directory for field.rvol and registration.json"
    ),
    set_options: list[str] | None = Option(
        None, "--set", help="Override config values (e.g., --set registration.steps=100)"
    ),
):
    """Register one image pair and print its metrics as JSON."""
    config = resolve_config(ctx, set_options)
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    optimizer = config.optimizer(
        steps=steps, learning_rate=learning_rate, pyramid_levels=levels
    )
    eval_case = select_case(
        corpus,
        case,
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        fixed_keypoints,
        moving_keypoints,
        config,
    )
    weighting = _weighting(lambda_a, mu_a, alpha, regularizer)

    logger.info("Registering case %s", eval_case.name)
    result = register_pair(eval_case.fixed, eval_case.moving, weighting, optimizer)
    report = evaluate_field(result.field, eval_case)

    if output is not None:
        output.mkdir(parents=True, exist_ok=True)
        save_field(result.field, output / "field.rvol")
        sidecar = {"case": eval_case.name, **result.sidecar(), "metrics": report.model_dump()}
        (output / "registration.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    emit_json(report.model_dump(mode="json"))


@report_errors
def evaluate_command(
    ctx: typer.Context,
    field_path: Path = Argument(..., help="Displacement field RVOL header"),
    corpus: Path | None = Option(None, "--corpus", help="Corpus directory with cases.yaml"),
    case: str | None = Option(None, "--case", help="Case name within the corpus"),
    fixed: Path | None = Option(None, "--fixed"),
    moving: Path | None = Option(None, "--moving"),
    fixed_labels: Path | None = Option(None, "--fixed-labels"),
    moving_labels: Path | None = Option(None, "--moving-labels"),
    fixed_keypoints: Path | None = Option(None, "--fixed-keypoints"),
    moving_keypoints: Path | None = Option(None, "--moving-keypoints"),
    set_options: list[str] | None = Option(None, "--set", help="Override config values"),
):
    """Compute Dice, TRE and folding fraction for a saved field."""
    config = resolve_config(ctx, set_options)
    eval_case = select_case(
        corpus,
        case,
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        fixed_keypoints,
        moving_keypoints,
        config,
    )
    report = evaluate_field(load_field(field_path), eval_case)
    emit_json(report.model_dump(mode="json"))


core_app.command("register")(register_command)
core_app.command("evaluate")(evaluate_command)
