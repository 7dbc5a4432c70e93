"""Multi-view 3D pose from heatmap mixtures and monocular estimates."""

__version__ = "0.1.0"
