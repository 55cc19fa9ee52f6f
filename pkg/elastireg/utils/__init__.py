"""Utility helpers for elastireg."""
