"""LLM-assisted denoising for graph recommenders."""

__version__ = "0.1.0"
