"""Attribute-variation adversarial attacks on fake-image detectors in a style-based generator's latent space."""

__version__ = "0.1.0"
