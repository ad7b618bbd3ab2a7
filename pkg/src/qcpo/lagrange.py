"""Projected-gradient control of the Lagrange multiplier."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = ["LagrangeState", "empirical_quantile", "update"]


def empirical_quantile(costs, u: float) -> float:
    """Lower empirical quantile: the ``ceil(u n)``-th smallest value."""
    x = np.sort(np.asarray(costs, dtype=np.float64))
    if x.size == 0:
        raise ValueError("empirical_quantile of an empty list")
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    k = max(math.ceil(u * x.size - 1e-9), 1)
    return float(x[k - 1])


@dataclass
class LagrangeState:
    lam: float = 0.0
    eta: float = 0.1
    d_th: float = 10.0
    eps0: float = 0.1
    window: int = 100
    statistic: str = "quantile"  # quantile (QCPO) | mean (expectation baseline)
    frozen: bool = False
    episode_costs: deque = field(default_factory=deque)
    last_estimate: float = float("nan")

    def __post_init__(self):
        if self.lam < 0 or self.eta <= 0 or not 0.0 < self.eps0 < 1.0 or self.window < 1:
            raise ValueError("invalid Lagrange state parameters")
        if self.statistic not in ("quantile", "mean"):
            raise ValueError(f"unknown statistic {self.statistic!r}")
        self.episode_costs = deque(self.episode_costs, maxlen=self.window)

    def record(self, costs) -> None:
        self.episode_costs.extend(float(c) for c in costs)

    @property
    def warm(self) -> bool:
        return len(self.episode_costs) >= self.window

    def estimate(self) -> float:
        if not self.episode_costs:
            return float("nan")
        if self.statistic == "mean":
            return float(np.mean(self.episode_costs))
        return empirical_quantile(self.episode_costs, 1.0 - self.eps0)

    def copy(self) -> "LagrangeState":
        return LagrangeState(self.lam, self.eta, self.d_th, self.eps0, self.window, self.statistic,
                             self.frozen, deque(self.episode_costs), self.last_estimate)


def update(state: LagrangeState) -> LagrangeState:
    """``lam <- max(lam + eta (q_hat - d_th), 0)``; skipped until the window fills."""
    new = state.copy()
    new.last_estimate = state.estimate()
    if state.frozen or not state.warm:
        return new
    new.lam = max(state.lam + state.eta * (new.last_estimate - state.d_th), 0.0)
    return new
