"""Few-shot unsupervised domain adaptation with image-to-class similarity patterns."""

__version__ = "0.1.0"
