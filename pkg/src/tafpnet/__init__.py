"""Temporal asymmetric feature propagation for video scene segmentation."""

__version__ = "0.1.0"
