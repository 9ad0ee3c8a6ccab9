"""Decentralized two-agent diffusion policies with sheaf-consensus latent alignment."""

__version__ = "0.1.0"
