"""Crowdsourcing task arrangement: simulator, dual-DQN engine, baselines."""

__version__ = "0.1.0"
