"""Masked first-order machine unlearning on small numpy classifiers."""

__version__ = "0.1.0"
