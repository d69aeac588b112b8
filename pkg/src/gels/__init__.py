"""P2P live-streaming simulator and graph reinforcement-learning tracker."""

__version__ = "0.1.0"
