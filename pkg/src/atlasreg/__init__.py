"""Atlas registration of brain MR images with missing correspondences, and atlas-space lesion statistics."""

__version__ = "0.1.0"
