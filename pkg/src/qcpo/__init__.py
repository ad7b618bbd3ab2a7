"""Quantile-constrained policy optimisation with quantile critics and Weibull tails."""

from .cmdp import EnvConfig, make_env
from .trainer import Agent, Trainer, TrainerConfig

__all__ = ["EnvConfig", "make_env", "Agent", "Trainer", "TrainerConfig"]
__version__ = "0.1.0"
