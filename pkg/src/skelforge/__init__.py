"""Skeleton-guided surface reconstruction from single images."""

__version__ = "0.1.0"
