"""Generative holacracy organization simulator and analysis toolkit."""

__version__ = "0.1.0"
