"""Self-training with purpose-preserving augmentation for generative dialogue state tracking."""

__version__ = "0.1.0"
