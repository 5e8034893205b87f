"""Matching-based dataset distillation with difficulty-aligned expert
training and shallow-parameter masking, built on a small numpy autodiff."""

__version__ = "0.1.0"
