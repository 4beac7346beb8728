"""MILD: VAE latent spaces with per-interaction HSMM priors for two-agent motion."""

from mild.gauss import BlockSplit, MultivariateGaussian

__version__ = "0.1.0"

__all__ = ["BlockSplit", "MultivariateGaussian", "__version__"]
