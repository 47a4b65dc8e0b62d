"""Stereo object-disparity toolkit: detection of paired boxes and their
per-object (dx, dy) disparity, with annotation tooling and evaluation."""

__version__ = "0.1.0"
