"""Streaming dense 3D reconstruction with an explicit spatial pointer memory."""

__version__ = "0.1.0"
