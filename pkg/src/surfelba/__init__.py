"""Joint LiDAR pose and surfel-map bundle adjustment."""

__version__ = "0.1.0"
