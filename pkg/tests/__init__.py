"""Test suite for the active-learning toolkit."""
