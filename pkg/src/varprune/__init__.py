"""Training with per-unit Bernoulli gates that learns the network's hidden sizes."""

__version__ = "0.1.0"
