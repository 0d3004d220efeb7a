"""MiniTOD: semi-supervised Markov latent-state dialog models with
sampling-based stochastic approximation training and exact desk-scale oracles."""

__version__ = "0.1.0"
