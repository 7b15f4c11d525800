"""Few-shot object detection on synthetic scenes, differentiable end to end."""

__version__ = "0.1.0"
