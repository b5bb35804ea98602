"""Varying-horizon robust economic MPC with online cost learning."""

__version__ = "0.1.0"
