"""Few-shot domain-adaptive semantic segmentation with class prototypes."""

__version__ = "0.1.0"
