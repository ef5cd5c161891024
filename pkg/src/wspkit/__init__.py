"""Relative-depth pre-training from 2D keypoints and integral 3D pose fine-tuning, at toy scale."""

__version__ = "0.1.0"
