"""Discretized Kakeya maximal functions on voxelized sets in two and three dimensions."""

__version__ = "0.1.0"
