"""Unit tests for the peftscout package."""
