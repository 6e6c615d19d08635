"""Slow-learner continual learning with post-hoc classifier alignment."""

__version__ = "0.1.0"
