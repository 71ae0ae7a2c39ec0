"""Discriminative answer ranking for visual dialog: image-only and image-history heads,
consensus dropout fusion, ranking metrics and a synthetic benchmark."""

__version__ = "0.1.0"
