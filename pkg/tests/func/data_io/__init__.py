"""Data input and output tests."""
