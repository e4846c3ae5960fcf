"""Masked generative modelling of synthetic motion with residual VQ tokens."""

__version__ = "0.1.0"
