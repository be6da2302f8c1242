"""Mixture-of-experts models with softmax and Gumbel-Softmax gates for tabular data."""

__version__ = "0.1.0"
