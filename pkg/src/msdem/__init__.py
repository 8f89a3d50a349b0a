"""Multi-source dynamic expansion engine for continual learning on
precomputed backbone features."""

__version__ = "0.1.0"
