"""Invertible normalizing-flow priors for linear inverse problems."""
__version__ = "0.1.0"
