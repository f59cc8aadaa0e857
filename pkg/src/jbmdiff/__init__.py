"""Behavior-conditioned multimodal diffusion recommender toolkit."""

__version__ = "0.1.0"
