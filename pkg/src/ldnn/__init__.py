"""Learned-diversity neural networks: trainable activation functions via an
alternating inner/outer optimization loop, with benchmark tasks and
loss-landscape diagnostics."""

__version__ = "0.1.0"
