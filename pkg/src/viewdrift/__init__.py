"""Simulator for view-induced trajectory manipulation of camera-based 3D detectors."""

__version__ = "0.1.0"
