"""Utility package for shared helpers (constants, config parsing)."""
