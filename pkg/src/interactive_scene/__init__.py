"""Interactive scene reconstruction from panoptic maps and CAD models."""

__version__ = "0.1.0"
