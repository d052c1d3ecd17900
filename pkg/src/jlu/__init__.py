"""Joint learning and unlearning of spurious attributes on synthetic data."""

__version__ = "0.1.0"
