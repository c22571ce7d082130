"""Diffusion classifiers at desk scale."""
