"""Turning-path extraction at intersections from tracked vehicle traces."""
