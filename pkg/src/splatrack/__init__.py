"""Online monocular point tracking with dynamic 3D Gaussians."""

__version__ = "0.1.0"
