"""Lifelong editing of a toy language model with masked side memories,
activation routing, distillation-filtered batching, error feedback and
loss-aware TIES merging."""

__version__ = "0.1.0"
