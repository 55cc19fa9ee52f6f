"""Configuration system for elastireg runs."""

import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, field_validator
import yaml

from .exceptions import ConfigParsingError, ConfigValidationError
from .registration import OptimizerConfig
from .utils.deep_merge import merge_configs

DEFAULT_CONFIG_FILE = "elastireg_config.yaml"
JOBS_ENV_VAR = "ELASTIREG_JOBS"
YAML_SUFFIXES = {".yaml", ".yml"}


class AmortizerSettings(BaseModel):
    """Hypernetwork architecture and training schedule."""

    hyper_hidden: int = Field(32, ge=1)
    target_hidden: list[int] = Field(default_factory=lambda: [32, 32])
    max_displacement: float = Field(5.0, gt=0.0)
    steps: int = Field(2000, ge=1)
    learning_rate: float = Field(1e-3, ge=0.0)


class SweepSettings(BaseModel):
    """Grid search defaults."""

    resolution: float = Field(0.1, gt=0.0, le=1.0)
    heuristics: list[str] = Field(default_factory=lambda: ["max_dice", "min_tre"])
    engine: Literal["instance", "amortized"] = "instance"
    refine: bool = False
    jobs: int | None = Field(None, validate_default=True)

    @field_validator("heuristics", mode="before")
    @classmethod
    def validate_heuristics(cls, v: Any) -> Any:
        return [v] if isinstance(v, str) else v

    @field_validator("jobs", mode="before")
    @classmethod
    def validate_jobs(cls, v: Any) -> int:
        """Fill from ELASTIREG_JOBS when unset; must be a positive integer."""
        if v is None:
            v = os.environ.get(JOBS_ENV_VAR, "1")
        try:
            jobs = int(v)
        except (TypeError, ValueError) as e:
            raise ValueError(f"jobs must be an integer, got {v!r}") from e
        if jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {jobs}")
        return jobs


class PreprocessingSettings(BaseModel):
    """Intensity clipping applied when cases are loaded."""

    clip_low: float = -1100.0
    clip_high: float = 1518.0
    normalization: Literal["minmax", "none"] = "minmax"


class LoggingSettings(BaseModel):
    level: str = "INFO"
    log_dir: str = "logs"

    @field_validator("level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Invalid log level: {v}. Must be one of {valid_levels}")
        return v.upper()


class ElastiregConfig(BaseModel):
    """Complete configuration for elastireg.

    The top-level ``ncc_window`` and ``seed`` apply to every run and take
    precedence over the same keys in ``registration``.
    """

    registration: OptimizerConfig = Field(default_factory=OptimizerConfig)
    amortizer: AmortizerSettings = Field(default_factory=AmortizerSettings)
    sweep: SweepSettings = Field(default_factory=SweepSettings)
    preprocessing: PreprocessingSettings = Field(default_factory=PreprocessingSettings)
    logging: LoggingSettings = Field(default_factory=LoggingSettings)
    ncc_window: int = Field(9, ge=3)
    seed: int = 0

    def optimizer(self, **overrides: Any) -> OptimizerConfig:
        """Registration settings with the shared window/seed and explicit overrides applied."""
        update = {"ncc_window": self.ncc_window, "seed": self.seed}
        update.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return OptimizerConfig(**{**self.registration.model_dump(), **update})
        except ValidationError as e:
            msg = f"Invalid registration settings: {e}"
            raise ConfigValidationError(msg, field="registration") from e


class ConfigManager:
    """Manages loading, validation, and merging of configuration."""

    def __init__(self, config_file: Path | None = None):
        self.config_file = Path(config_file) if config_file else Path(DEFAULT_CONFIG_FILE)
        self._config: ElastiregConfig | None = None

    def _read_file(self) -> dict[str, Any]:
        try:
            text = self.config_file.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            msg = f"Error reading config file: {e}"
            raise ConfigParsingError(msg, config_path=str(self.config_file)) from e
        if self.config_file.suffix in YAML_SUFFIXES:
            try:
                data = yaml.safe_load(text) or {}
            except yaml.YAMLError as e:
                msg = f"Invalid YAML in config file: {e}"
                raise ConfigParsingError(msg, config_path=str(self.config_file)) from e
            if not isinstance(data, dict):
                msg = "Config file must contain a mapping"
                raise ConfigParsingError(msg, config_path=str(self.config_file))
            return data
        lines = [
            line.strip()
            for line in text.splitlines()
            if line.strip() and not line.strip().startswith("#")
        ]
        for line in lines:
            if "=" not in line:
                msg = f"Expected key=value, got {line!r}"
                raise ConfigParsingError(msg, config_path=str(self.config_file))
        return parse_cli_overrides(lines)

    def load_config(self) -> ElastiregConfig:
        """Load configuration from file with validation."""
        if self._config is not None:
            return self._config

        config_data: dict[str, Any] = {}
        if self.config_file.exists():
            config_data = merge_configs(config_data, self._read_file())

        try:
            self._config = ElastiregConfig(**config_data)
        except ValidationError as e:
            msg = f"Configuration validation failed: {e}"
            raise ConfigValidationError(msg, config_path=str(self.config_file)) from e
        return self._config

    def merge_cli_overrides(
        self, config: ElastiregConfig, cli_overrides: dict[str, Any]
    ) -> ElastiregConfig:
        """Merge CLI overrides with loaded configuration."""
        if not cli_overrides:
            return config
        merged_dict = merge_configs(config.model_dump(), cli_overrides)
        try:
            return ElastiregConfig(**merged_dict)
        except ValidationError as e:
            field = ".".join(str(p) for p in e.errors()[0]["loc"]) if e.errors() else None
            msg = f"Configuration validation failed after CLI overrides: {e}"
            raise ConfigValidationError(msg, field=field) from e

    def save_config(self, config: ElastiregConfig, file_path: Path | None = None) -> Path:
        """Save configuration to YAML file."""
        output_path = Path(file_path) if file_path else self.config_file
        with output_path.open("w", encoding="utf-8") as f:
            yaml.safe_dump(config.model_dump(mode="json"), f, default_flow_style=False, sort_keys=False)
        return output_path

    def create_default_config_file(self, force: bool = False) -> Path:
        if self.config_file.exists() and not force:
            msg = f"Configuration file {self.config_file} already exists"
            raise FileExistsError(msg)
        return self.save_config(ElastiregConfig())

    def validate_config_schema(self, config_dict: dict[str, Any]) -> list[str]:
        """Validate configuration against schema and return error messages."""
        try:
            ElastiregConfig(**config_dict)
            return []
        except ValidationError as e:
            return [str(error) for error in e.errors()]


def _parse_value(value: str) -> Any:
    if "," in value:
        return [_parse_value(part.strip()) for part in value.split(",") if part.strip()]
    lowered = value.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def parse_cli_overrides(cli_args: list[str]) -> dict[str, Any]:
    """Parse ``section.key=value`` overrides into a nested dict.

    Values become int, float, bool, None or a comma-separated list when they
    parse as such; anything else stays a string.
    """
    overrides: dict[str, Any] = {}
    for arg in cli_args:
        if "=" not in arg:
            continue
        key, value = arg.split("=", 1)
        keys = key.strip().split(".")
        current = overrides
        for k in keys[:-1]:
            current = current.setdefault(k, {})
        current[keys[-1]] = _parse_value(value.strip())
    return overrides


def load_config(
    config_file: Path | None = None, set_options: list[str] | None = None
) -> ElastiregConfig:
    """Load the config file and apply ``--set`` overrides."""
    manager = ConfigManager(Path(config_file) if config_file else None)
    config = manager.load_config()
    return manager.merge_cli_overrides(config, parse_cli_overrides(set_options or []))
