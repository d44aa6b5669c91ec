"""Tests for trafficflow; run with `python -m unittest` from the repository root."""
