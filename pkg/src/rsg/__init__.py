"""Rare-class sample generation for training classifiers on imbalanced data."""

__version__ = "0.1.0"
