"""Functional tests for the peftscout package."""
