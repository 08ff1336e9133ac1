"""Depth recovery for a camera-projector pair by optimizing a density voxel grid.

Captured images under projected binary patterns are explained by volume
rendering through a trainable density grid in NDC space; the depth map is
read off the rendered surface points.
"""

__version__ = "0.1.0"
