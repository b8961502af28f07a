"""Sparse spatial-temporal graph convolution networks at desk scale.

A small research library for skeleton-based action recognition built on
a from-scratch reverse-mode autodiff core: dense training, lottery-ticket
mask learning on frozen weights, a two-stage sparse-network generator
(group-lasso warm-up followed by masked fine-tuning), and multi-level
sparsity ensembles, plus a command-line interface.
"""

__version__ = "0.1.0"
