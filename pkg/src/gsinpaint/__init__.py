"""Depth-guided, cross-view-consistent inpainting of 3D Gaussian scenes."""

__version__ = "0.1.0"
