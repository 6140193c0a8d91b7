"""Weakly supervised ROI grounding with image/attribute cross-attention."""

__version__ = "0.1.0"
