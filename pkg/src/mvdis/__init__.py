"""Two-stage multi-view representation disentanglement at desk scale."""

__version__ = "0.1.0"
