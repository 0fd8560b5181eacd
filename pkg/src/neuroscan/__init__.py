"""Brain-MRI tumor classification and segmentation pipeline."""

__version__ = "0.1.0"
