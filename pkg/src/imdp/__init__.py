"""Desk-scale lab for differentially private, code-conditioned
adversarial generators: a small autodiff core, weight-clipped critic
training with calibrated gradient noise, a moments accountant, latent
code machinery, and an evaluation protocol for utility-vs-privacy
trends."""

__version__ = "0.1.0"

from . import autodiff, data, evaluation, latent, nets, privacy, train

__all__ = ["autodiff", "data", "evaluation", "latent", "nets", "privacy",
           "train", "__version__"]
