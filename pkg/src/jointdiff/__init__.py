"""Desk-scale joint RGB + dense-modality diffusion."""

__version__ = "0.1.0"
