"""Environment label smoothing for domain-adversarial training: a small autodiff
engine, smoothed discriminator losses, divergence oracles, a two-parameter
convergence lab, toy multi-domain data and training diagnostics."""

__version__ = "0.1.0"
