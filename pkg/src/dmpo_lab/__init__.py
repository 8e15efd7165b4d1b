"""Learned residual warm-starting and optimization for sampling-based MPC on a quadrotor."""

__version__ = "0.1.0"
