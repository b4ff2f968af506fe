"""Online learning of a neural PID + feedforward controller under a Lyapunov penalty."""

__version__ = "0.1.0"
