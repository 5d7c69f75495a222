"""Synthesis of compatible control Lyapunov and barrier functions via SOS programming."""

__version__ = "0.1.0"
