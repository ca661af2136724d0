"""Diffusion-based attribute editing and style manipulation.

Deterministic conditional-DDIM encode/decode, latent- and reference-guided
style codes, a hierarchical style-modulation encoder, image-specific semantic
directions, and a forward-backward consistency training stage, plus a toy
dataset, evaluation metrics, CLI, and an HTTP edit service.
"""

__version__ = "0.1.0"
