"""3D-CNN + recurrent classifiers for sequences of brain volumes."""

__version__ = "0.1.0"
