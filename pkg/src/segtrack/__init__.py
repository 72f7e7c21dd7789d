"""Single-shot discriminative segmentation tracker."""

__version__ = "0.1.0"
