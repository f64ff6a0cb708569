"""Sparse-view cone-beam CT with a neural attenuation field refined by diffusion pseudo-labels."""
from __future__ import annotations

__version__ = "0.1.0"
