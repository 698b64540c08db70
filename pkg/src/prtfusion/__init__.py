"""Per-object depth estimation by fusing pseudo-LiDAR, appearance and tracklets."""

__version__ = "0.1.0"
