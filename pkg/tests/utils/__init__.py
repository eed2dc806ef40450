"""Test utilities: deterministic synthetic datasets and file writers."""
