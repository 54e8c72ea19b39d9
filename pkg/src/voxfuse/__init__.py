"""Voxel-space camera/LiDAR fusion with text priors, weather gating and depth-aware alignment."""

__version__ = "0.1.0"
