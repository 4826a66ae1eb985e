"""Stereo + LIDAR fusion for dense depth, trainable with or without ground truth."""

__version__ = "0.1.0"
