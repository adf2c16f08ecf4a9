"""Universal adversarial roof-mesh toolkit.

Synthesizes a single 3D mesh (shape + per-vertex texture) that, rendered
consistently into LiDAR point clouds and RGB images on top of a host car,
suppresses that car's detection by camera-LiDAR 3D detectors.
"""

__version__ = "0.1.0"
