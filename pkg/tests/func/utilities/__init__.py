"""Functional tests for utilities."""
