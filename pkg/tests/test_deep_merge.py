"""
Unit tests for the configuration deep merge utility.

Tests cover nested dictionaries, list replacement, None overrides, the depth
limit, and immutability of the inputs.
"""

import pytest

from elastireg.exceptions import ConfigurationError, ElastiregError
from elastireg.utils.deep_merge import MAX_DEPTH, DeepMergeError, merge_configs


class TestBasicDictMerge:
    """Test basic dictionary merging functionality."""

    def test_simple_dict_merge(self):
        """Test merging two simple dictionaries."""
        base = {"a": 1, "b": 2}
        override = {"c": 3}
        result = merge_configs(base, override)

        assert result == {"a": 1, "b": 2, "c": 3}
        assert base == {"a": 1, "b": 2}

    def test_nested_sections_merge_key_wise(self):
        """Test that a partial section keeps the base's other keys."""
        base = {"registration": {"steps": 250, "learning_rate": 1e-4}}
        override = {"registration": {"steps": 40}, "seed": 3}
        result = merge_configs(base, override)

        assert result == {"registration": {"steps": 40, "learning_rate": 1e-4}, "seed": 3}

    def test_empty_override(self):
        base = {"sweep": {"resolution": 0.1}}
        assert merge_configs(base, {}) == base
        assert merge_configs({}, base) == base


class TestListMerge:
    """Test list merging."""

    def test_lists_replace_by_default(self):
        """Test that an override list replaces the base list."""
        base = {"sweep": {"heuristics": ["max_dice", "min_tre"]}}
        override = {"sweep": {"heuristics": ["min_folding"]}}

        assert merge_configs(base, override)["sweep"]["heuristics"] == ["min_folding"]


class TestOverrideValues:
    """Test scalar, None and type-changing overrides."""

    def test_none_replaces_value(self):
        result = merge_configs({"sweep": {"jobs": 4}}, {"sweep": {"jobs": None}})
        assert result == {"sweep": {"jobs": None}}

    def test_scalar_replaces_section(self, caplog):
        """Test that replacing a section with a scalar is allowed but logged."""
        result = merge_configs({"logging": {"level": "INFO"}}, {"logging": "off"})

        assert result == {"logging": "off"}
        assert "replaces a section" in caplog.text


class TestErrorHandling:
    """Test error conditions."""

    def test_recursion_depth_limit(self):
        """Test that very deep structures raise a DeepMergeError with the path."""
        base: dict = {}
        override: dict = {}
        cursor_base, cursor_override = base, override
        for _ in range(MAX_DEPTH + 2):
            cursor_base["k"] = {}
            cursor_override["k"] = {}
            cursor_base, cursor_override = cursor_base["k"], cursor_override["k"]

        with pytest.raises(DeepMergeError) as exc_info:
            merge_configs(base, override)
        assert exc_info.value.path.startswith("k.k")
        assert "Maximum merge depth" in str(exc_info.value)

    def test_merge_error_is_a_configuration_error(self):
        error = DeepMergeError("Maximum merge depth 32 exceeded", "a.b")
        assert isinstance(error, ConfigurationError)
        assert isinstance(error, ElastiregError)
        assert error.path == "a.b"
        assert error.field == "a.b"


class TestImmutability:
    """Test that inputs are never modified."""

    def test_inputs_unchanged(self):
        base = {"amortizer": {"target_hidden": [32, 32]}}
        override = {"amortizer": {"target_hidden": [16]}, "extra": {"a": [1]}}
        result = merge_configs(base, override)

        assert result["amortizer"]["target_hidden"] == [16]
        result["amortizer"]["target_hidden"].append(8)
        result["extra"]["a"].append(2)
        assert base == {"amortizer": {"target_hidden": [32, 32]}}
        assert override == {"amortizer": {"target_hidden": [16]}, "extra": {"a": [1]}}
