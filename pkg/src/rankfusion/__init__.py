"""Tensor-rank regularized multimodal sequence learning."""

__version__ = "0.1.0"
