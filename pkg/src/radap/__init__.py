"""Adversarial patch attacks and segmentation-based defenses for toy face recognition."""

__version__ = "0.1.0"
