"""Custom exception classes for elastireg domain-specific errors."""


class ElastiregError(Exception):
    """Base exception class for all elastireg related errors."""

    def __init__(self, message: str, details: str | None = None):
        self.message = message
        self.details = details
        super().__init__(message)


class ShapeError(ElastiregError):
    """Exception raised when grids disagree on their domain or an axis is invalid."""


class ParameterError(ElastiregError):
    """Exception raised for invalid operation parameters."""


class NumericalError(ElastiregError):
    """Exception raised when a loss or gradient stops being finite."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message, f"Step: {step}" if step is not None else None)


class FormatError(ElastiregError):
    """Exception raised when a volume, keypoint or checkpoint file cannot be parsed."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(message, f"File: {path}" if path else None)


class PhantomError(ElastiregError):
    """Exception raised for invalid synthetic phantom specifications."""


class EvaluationError(ElastiregError):
    """Exception raised when evaluation data is missing or inconsistent."""


class ConfigurationError(ElastiregError):
    """Exception raised for configuration-related errors."""

    def __init__(
        self, message: str, config_path: str | None = None, field: str | None = None
    ):
        self.config_path = config_path
        self.field = field
        details = []
        if config_path:
            details.append(f"Config file: {config_path}")
        if field:
            details.append(f"Field: {field}")
        super().__init__(message, "; ".join(details) if details else None)


class ConfigValidationError(ConfigurationError):
    """Exception raised when configuration validation fails."""


class ConfigParsingError(ConfigurationError):
    """Exception raised when configuration file parsing fails."""
