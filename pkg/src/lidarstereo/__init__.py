"""Sparse-LiDAR-assisted iterative stereo disparity estimation, desk scale."""

__version__ = "0.1.0"
