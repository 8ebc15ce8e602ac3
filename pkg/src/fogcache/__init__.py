"""Cooperative edge-caching simulator with federated dueling-DQN agents."""

__version__ = "0.1.0"
