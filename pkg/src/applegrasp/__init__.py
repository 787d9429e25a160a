"""Fruit shape and grasp pose estimation from single-view point clouds."""

__version__ = "0.1.0"
