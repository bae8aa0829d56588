"""Config-driven experiment runner and CLI."""

from .config import ExperimentConfig

__all__ = ["ExperimentConfig"]
