"""Unsupervised source separation by remixing: MixIT, RemixIT and Self-Remixing."""

__version__ = "0.1.0"
