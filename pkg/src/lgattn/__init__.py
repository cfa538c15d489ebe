"""Local/global gated self-attention for frame-sequence classification."""

__version__ = "0.1.0"
