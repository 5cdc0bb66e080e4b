"""Class-wise memory augmented multi-referring segmentation, desk scale."""

__version__ = "0.1.0"
