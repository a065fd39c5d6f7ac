"""Progressive soft pruning for small denoising diffusion models.

Trains a small fully-connected noise predictor on synthetic data, prunes it
with a progressive soft schedule driven by a gradient-flow importance
criterion, and evaluates sample quality, consistency and efficiency of the
pruned model against the dense one.
"""

__version__ = "0.1.0"
