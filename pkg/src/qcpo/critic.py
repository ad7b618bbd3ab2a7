"""Reward value head, cost quantile head, and their losses."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, constant
from .nnfa import MLP, MLPSpec, ParamStore

__all__ = [
    "quantile_fractions",
    "huber",
    "quantile_huber_loss",
    "pinball_loss",
    "quantile_td_loss",
    "cost_value_from_quantiles",
    "cost_value_loss",
    "reward_value_loss",
    "QuantileNet",
    "ValueNet",
    "crossing_rate",
]


def quantile_fractions(n_q: int) -> np.ndarray:
    """Midpoint fractions ``(2i - 1) / (2 n_q)`` for ``i = 1..n_q``."""
    if n_q < 1:
        raise ValueError(f"n_q must be >= 1, got {n_q}")
    return (2.0 * np.arange(1, n_q + 1) - 1.0) / (2.0 * n_q)


def huber(x, kappa: float = 1.0):
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax <= kappa, 0.5 * x * x, kappa * (ax - 0.5 * kappa))


def quantile_huber_loss(delta, u, kappa: float = 1.0):
    """``|u - 1{delta < 0}| * huber(delta) / kappa``, elementwise."""
    delta = np.asarray(delta, dtype=np.float64)
    return np.abs(u - (delta < 0)) * huber(delta, kappa) / kappa


def pinball_loss(delta, u):
    delta = np.asarray(delta, dtype=np.float64)
    return (u - (delta < 0)) * delta


def quantile_td_loss(q: Tensor, target_next: np.ndarray, costs, dones, gamma: float,
                     kappa: float = 1.0, fractions: np.ndarray | None = None, dtype=np.float64) -> Tensor:
    """Mean over batch and all (i, j) pairs of the quantile-Huber TD loss.

    ``q`` holds the online quantiles ``q_i(s)`` with shape (B, n_q);
    ``target_next`` holds frozen ``q_j(s')`` from the old network.  Terminal
    transitions bootstrap from zero.  ``dtype=np.float32`` halves the cost of the
    pairwise block at the price of single-precision accumulation.
    """
    b, n_q = q.shape
    u = quantile_fractions(n_q) if fractions is None else fractions
    costs = np.asarray(costs, dtype=np.float64).reshape(b, 1)
    live = 1.0 - np.asarray(dones, dtype=np.float64).reshape(b, 1)
    target = costs + gamma * live * np.asarray(target_next, dtype=np.float64)  # (B, n_q)
    delta = target.astype(dtype)[:, None, :] - q.value.astype(dtype)[:, :, None]  # delta[b, i, j]
    neg = delta < 0
    ad = np.abs(delta)
    h = np.minimum(ad, kappa)
    # signed clipped residual, already weighted by |u - 1{delta < 0}|
    u3 = u.reshape(1, n_q, 1).astype(dtype)
    wclip = np.where(neg, (u3 - 1.0) * h, u3 * h)
    # weight * huber = |wclip| * (ad - h / 2)
    ad -= 0.5 * h
    value = float(np.sum(np.abs(wclip) * ad, dtype=np.float64)) / (kappa * delta.size)
    scale = 1.0 / (kappa * delta.size)

    def back(g):
        # d delta / d q_i = -1, summed over targets j
        return (-g * scale * wclip.sum(axis=2, dtype=np.float64),)

    return Tensor._make(np.asarray(value), (q,), back)


def cost_value_from_quantiles(q) -> np.ndarray | float:
    """Mean of the quantile estimates along the last axis."""
    val = np.mean(np.asarray(q, dtype=np.float64), axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def cost_value_loss(q: Tensor, cost_to_go) -> Tensor:
    """``0.5 * mean((mean_i q_i(s) - C)^2)``."""
    err = q.mean(axis=-1) - constant(cost_to_go)
    return (err * err).mean() * 0.5


def reward_value_loss(v: Tensor, returns) -> Tensor:
    """``0.5 * mean((V(s) - R)^2)``."""
    err = v.reshape(-1) - constant(np.asarray(returns, dtype=np.float64).reshape(-1))
    return (err * err).mean() * 0.5


def crossing_rate(q: np.ndarray) -> float:
    """Fraction of rows whose quantile estimates are not non-decreasing."""
    q = np.atleast_2d(q)
    return float(np.mean(np.any(np.diff(q, axis=-1) < 0, axis=-1)))


class QuantileNet:
    """Observation -> ``n_q`` nonnegative quantiles (exp output head)."""

    def __init__(self, obs_dim: int, n_q: int, hidden, store: ParamStore, rng, prefix: str = "q"):
        self.n_q = n_q
        self.fractions = quantile_fractions(n_q)
        self.net = MLP(MLPSpec(obs_dim, tuple(hidden), n_q, output_activation="exp"), store, prefix, rng)
        self.prefix = prefix

    def __call__(self, obs, flat=None) -> Tensor:
        return self.net(obs, flat)

    def values(self, obs, flat=None) -> np.ndarray:
        return self.net.forward(obs, flat)


class ValueNet:
    def __init__(self, obs_dim: int, hidden, store: ParamStore, rng, prefix: str = "v"):
        self.net = MLP(MLPSpec(obs_dim, tuple(hidden), 1), store, prefix, rng)
        self.prefix = prefix

    def __call__(self, obs, flat=None) -> Tensor:
        return self.net(obs, flat).reshape(-1)

    def values(self, obs, flat=None) -> np.ndarray:
        return self.net.forward(obs, flat).reshape(-1)
