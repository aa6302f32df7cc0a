"""Desk-scale Bayesian neural network toolkit.

Concrete-dropout MLP training, Kronecker-factored Laplace posteriors,
Monte-Carlo predictive uncertainty, calibration metrics, CRF-based
contextual smoothing, and an uncertainty-gated domain-adaptation loop.
"""

__version__ = "0.1.0"
