"""Masked-autoencoder pretraining, adaptation and evaluation at desk scale."""

__version__ = "0.1.0"
