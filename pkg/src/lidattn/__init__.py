"""Self, performer and agent attention with attentive statistics pooling for LID."""

__version__ = "0.1.0"
