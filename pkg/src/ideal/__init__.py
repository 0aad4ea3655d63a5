"""Saliency-guided sample selection for active learning on synthetic images."""

__version__ = "0.1.0"
