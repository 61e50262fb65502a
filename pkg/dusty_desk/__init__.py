"""Dusty Desk - desk-scale LiDAR generation with learned point-drops."""

__version__ = "0.1.0"
