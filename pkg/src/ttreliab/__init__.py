"""Tensor-train transport maps for rare-event estimation in composite structures."""

from __future__ import annotations

__version__ = "0.1.0"
