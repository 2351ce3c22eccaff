"""Click-guided lesion segmentation and RECIST diameter prediction."""

__version__ = "0.1.0"
