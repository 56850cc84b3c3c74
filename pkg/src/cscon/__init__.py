"""Dual-branch center/surrounding contrastive pretraining for point clouds."""

__version__ = "0.1.0"
