"""Thumbnail-input image classification: a learned downscaler, a small-input
student network, two-stage training with distillation, and cost analysis.

Submodules are imported on demand; ``import thumbnet`` stays cheap so the
command-line entry point can configure threading first.
"""

__version__ = "0.1.0"
