"""Viability and discriminating kernels for race-car path planning on a grid."""

from __future__ import annotations

__version__ = "0.1.0"
