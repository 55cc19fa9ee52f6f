"""Command-line interface for elastireg."""

import json
import logging
import logging.handlers
from pathlib import Path
import sys

import typer
from typer import Option

from .cli_core import core_app, evaluate_command, register_command
from .cli_experiment import (
    alpha_sweep_command,
    experiment_app,
    phantom_command,
    sweep_command,
    train_command,
)
from .cli_utils import error_payload, manage_config, utils_app
from .exceptions import ElastiregError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(log_level: str = "INFO", log_dir: str | Path = "logs") -> logging.Logger:
    """Configure logging for the CLI application.

    Console output goes to stderr so stdout carries only JSON.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for the rotating log file

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger("elastireg")
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))

    # Prevent duplicate handlers
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.WARNING)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(console_handler)

    logs_dir = Path(log_dir)
    try:
        logs_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            logs_dir / "elastireg.log",
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5,
        )
    except OSError as e:
        logger.warning("File logging disabled: %s", e)
        return logger
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(file_handler)

    return logger


app = typer.Typer(
    name="elastireg",
    help="Deformable registration with elasticity-regularized losses and amortized parameter sweeps",
    add_completion=False,
    no_args_is_help=True,
)


@app.callback()
def global_options(
    ctx: typer.Context,
    log_level: str | None = Option(
        None, "--log-level", help="DEBUG, INFO, WARNING, ERROR or CRITICAL"
    ),
    config: Path | None = Option(None, "--config", help="Configuration file"),
):
    """Global options shared by every command."""
    ctx.obj = {"config": config}
    if log_level is not None:
        logging.getLogger("elastireg").setLevel(
            getattr(logging, log_level.upper(), logging.INFO)
        )


app.add_typer(core_app, name="core")
app.add_typer(experiment_app, name="experiment")
app.add_typer(utils_app, name="utils")

app.command("register")(register_command)
app.command("evaluate")(evaluate_command)
app.command("phantom")(phantom_command)
app.command("train")(train_command)
app.command("sweep")(sweep_command)
app.command("alpha-sweep")(alpha_sweep_command)
app.command("config")(manage_config)


def main():
    """CLI entry point - synchronous wrapper for Typer."""
    try:
        logger = setup_logging()
        logger.debug("Starting elastireg CLI")
        app()
    except KeyboardInterrupt:
        typer.echo(json.dumps({"error": "KeyboardInterrupt", "message": "Cancelled"}), err=True)
        sys.exit(1)
    except ElastiregError as e:
        logger = logging.getLogger("elastireg")
        logger.exception("Application error")
        typer.echo(json.dumps(error_payload(e)), err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
