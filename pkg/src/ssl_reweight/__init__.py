"""Semi-supervised learning with influence-driven per-example weights."""

__version__ = "0.1.0"
