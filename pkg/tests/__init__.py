"""Test suite for the peftscout package."""
