"""Utility CLI commands and helpers shared by the command modules.

Commands write machine-readable JSON to stdout; errors are reported as a JSON
object on stderr with exit status 1.
"""

from collections.abc import Callable
import functools
import json
import logging
from pathlib import Path
from typing import Any

import typer
from typer import Argument, Option

from .config import ConfigManager, ElastiregConfig, load_config
from .exceptions import ElastiregError, ParameterError
from .metrics import EvalCase
from .volume_io import CaseSpec, load_case, load_corpus

utils_app = typer.Typer(
    name="utils",
    help="Configuration and helper commands",
    no_args_is_help=True,
)


def emit_json(data: Any) -> None:
    """Print ``data`` as indented JSON on stdout."""
    typer.echo(json.dumps(data, indent=2))


def error_payload(error: ElastiregError) -> dict[str, Any]:
    return {
        "error": type(error).__name__,
        "message": error.message,
        "details": error.details,
    }


def report_errors(command: Callable) -> Callable:
    """Turn domain errors raised by ``command`` into a JSON error on stderr, exit 1."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except ElastiregError as e:
            logger = logging.getLogger("elastireg")
            logger.debug("Command failed: %s", e.message, exc_info=True)
            typer.echo(json.dumps(error_payload(e)), err=True)
            raise typer.Exit(code=1) from e

    return wrapper


def resolve_config(ctx: typer.Context | None, set_options: list[str] | None) -> ElastiregConfig:
    """Load the config named by the global ``--config`` option and apply ``--set``."""
    config_path = None
    if ctx is not None and ctx.obj:
        config_path = ctx.obj.get("config")
    return load_config(config_path, set_options)


def parse_float_list(text: str | None, what: str) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        msg = f"Invalid {what}: {text!r} (expected comma-separated numbers)"
        raise ParameterError(msg) from e


def parse_dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        msg = f"Invalid dims: {text!r} (expected e.g. 64,64)"
        raise ParameterError(msg) from e


def select_case(
    corpus: Path | None,
    case_name: str | None,
    fixed: Path | None,
    moving: Path | None,
    fixed_labels: Path | None = None,
    moving_labels: Path | None = None,
    fixed_keypoints: Path | None = None,
    moving_keypoints: Path | None = None,
    config: ElastiregConfig | None = None,
) -> EvalCase:
    """One case from a corpus manifest or from explicit volume paths."""
    if corpus is not None:
        cases = load_corpus(corpus)
        if case_name is None:
            return cases[0]
        for case in cases:
            if case.name == case_name:
                return case
        msg = f"Case '{case_name}' not found in corpus"
        raise ParameterError(msg, f"Available: {', '.join(c.name for c in cases)}")
    if fixed is None or moving is None:
        msg = "Provide --corpus or both --fixed and --moving"
        raise ParameterError(msg)
    preprocessing = (config or ElastiregConfig()).preprocessing
    spec = CaseSpec(
        name=case_name or Path(fixed).stem,
        fixed=fixed,
        moving=moving,
        fixed_labels=fixed_labels,
        moving_labels=moving_labels,
        fixed_keypoints=fixed_keypoints,
        moving_keypoints=moving_keypoints,
        clip_low=preprocessing.clip_low,
        clip_high=preprocessing.clip_high,
        normalization=preprocessing.normalization,
    )
    return load_case(spec)


@report_errors
def manage_config(
    action: str = Argument(..., help="Configuration action: 'init', 'show', or 'validate'"),
    config: str | None = Option(None, "--config", help="Path to configuration file"),
    force: bool = Option(False, "--force", help="Overwrite an existing file on init"),
):
    """Manage the run configuration.

    Actions:
    - init: Create a default configuration file
    - show: Print the effective configuration as JSON
    - validate: Check the configuration file for errors
    """
    manager = ConfigManager(Path(config) if config else None)

    if action == "init":
        try:
            path = manager.create_default_config_file(force=force)
        except FileExistsError:
            msg = f"Configuration file {manager.config_file} already exists"
            raise ParameterError(msg, "Use --force to overwrite") from None
        emit_json({"created": str(path)})
    elif action == "show":
        emit_json(manager.load_config().model_dump(mode="json"))
    elif action == "validate":
        if not manager.config_file.exists():
            emit_json({"valid": True, "config_file": None})
            return
        config_data = manager.load_config()
        errors = manager.validate_config_schema(config_data.model_dump())
        emit_json({"valid": not errors, "config_file": str(manager.config_file), "errors": errors})
        if errors:
            raise typer.Exit(code=1)
    else:
        msg = f"Unknown config action '{action}'"
        raise ParameterError(msg, "Use one of: init, show, validate")


utils_app.command("config")(manage_config)

