"""Dataset inference for diffusion models at desk scale.

A small trainable denoiser, membership features computed from it, a
logistic scorer fitted with cross-fitting and a one-tailed Welch test that
decides whether a suspect set was part of the model's training data.
"""
__version__ = "0.1.0"
