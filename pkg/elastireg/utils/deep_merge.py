"""
Deep merge for nested configuration dictionaries.

Rules:
- Dictionaries merge key-wise and recursively.
- Lists in the override replace the base list, so a ``--set sweep.alphas=...``
  override is not appended to the file's list.
- Any other value in the override replaces the base value, including None.
- Inputs are never mutated; the result is a fresh deep copy.
"""

from copy import deepcopy
import logging
from typing import Any

from ..exceptions import ConfigurationError

logger = logging.getLogger(__name__)

MAX_DEPTH = 32


class DeepMergeError(ConfigurationError):
    """Raised when the merge cannot be completed."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        text = f"{message} at '{path}'" if path else message
        super().__init__(text, field=path or None)


def merge_configs(
    base_config: dict[str, Any], override_config: dict[str, Any]
) -> dict[str, Any]:
    """Merge ``override_config`` onto ``base_config``.

    Example:
        >>> merge_configs({"registration": {"steps": 250}}, {"registration": {"seed": 3}})
        {'registration': {'steps': 250, 'seed': 3}}
    """
    return _merge(deepcopy(base_config), override_config, "", 0)


def _merge(target: Any, source: Any, path: str, depth: int) -> Any:
    if depth > MAX_DEPTH:
        msg = f"Maximum merge depth {MAX_DEPTH} exceeded"
        raise DeepMergeError(msg, path)

    if isinstance(target, dict) and isinstance(source, dict):
        for key, value in source.items():
            child = f"{path}.{key}" if path else str(key)
            if key in target:
                target[key] = _merge(target[key], value, child, depth + 1)
            else:
                target[key] = deepcopy(value)
        return target

    if isinstance(target, dict) and source is not None:
        logger.warning("Override at '%s' replaces a section with a scalar", path)
    return deepcopy(source)
