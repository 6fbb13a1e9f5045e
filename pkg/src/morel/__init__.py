"""Motion-oriented reinforcement learning on a synthetic sprite environment."""

__version__ = "0.1.0"
