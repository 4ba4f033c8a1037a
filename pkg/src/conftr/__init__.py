"""Conformal prediction with differentiable calibration and conformal training."""

__version__ = "0.1.0"
