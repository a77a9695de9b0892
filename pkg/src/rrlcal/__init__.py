"""Residual reinforcement learning for calibrating a virtual ECU's air-path map."""

__version__ = "0.1.0"
