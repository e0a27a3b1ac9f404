"""Text-guided object removal: synthetic data, model, training and evaluation."""

__version__ = "0.1.0"
