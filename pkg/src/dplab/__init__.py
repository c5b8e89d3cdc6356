"""Differentially private GAN training lab.

Reverse-mode autodiff, per-example clipped noisy gradients, a
Renyi-divergence privacy accountant, a small WGAN-GP trainer, an
inception-score evaluator, and a sweep harness that ties them together.
"""

__version__ = "0.1.0"
