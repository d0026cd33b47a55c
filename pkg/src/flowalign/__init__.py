"""Tree-structured GRPO alignment of rectified-flow models on toy distributions."""

__version__ = "0.1.0"
