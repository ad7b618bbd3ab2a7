"""Weibull model of the right tail of the discounted cost sum.

The tail decays as ``P(X > x) ~ exp(-(x / beta)**alpha)``; per state the pair
``(alpha, beta)`` is fitted to the rightmost ``k`` quantile estimates by least
squares in log space, where the Weibull quantile is linear in
``(log beta, 1 / alpha)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import GradTape, Tensor, constant
from .nnfa import MLP, MLPSpec, Adam, ParamStore, SIGMOID_SCALE

__all__ = [
    "WeibullParams",
    "weibull_survival",
    "weibull_pdf",
    "weibull_logpdf",
    "weibull_quantile",
    "tail_fit_loss",
    "fit_weibull",
    "TailNet",
    "Q_FLOOR",
]

Q_FLOOR = 1e-6


@dataclass(frozen=True)
class WeibullParams:
    alpha: float | np.ndarray
    beta: float | np.ndarray

    def __post_init__(self):
        a, b = np.asarray(self.alpha), np.asarray(self.beta)
        if np.any(a <= 0) or np.any(a >= SIGMOID_SCALE) or np.any(b <= 0):
            raise ValueError(f"need 0 < alpha < {SIGMOID_SCALE} and beta > 0, got {self.alpha}, {self.beta}")


def _ret(v):
    return float(v) if np.ndim(v) == 0 else v


def weibull_survival(x, p: WeibullParams):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("x must be nonnegative")
    return _ret(np.exp(-((x / p.beta) ** p.alpha)))


def weibull_logpdf(x, alpha, beta):
    """Log density, computed without forming the density (no underflow)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.log(x) - np.log(beta)
    return np.log(alpha) - np.log(beta) + (alpha - 1.0) * z - np.exp(alpha * z)


def weibull_pdf(x, p: WeibullParams):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("x must be positive")
    return _ret(np.exp(weibull_logpdf(x, p.alpha, p.beta)))


def weibull_quantile(u, p: WeibullParams):
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie in (0, 1)")
    return _ret(p.beta * (-np.log1p(-u)) ** (1.0 / p.alpha))


def _log_cu(u) -> np.ndarray:
    return np.log(-np.log1p(-np.asarray(u, dtype=np.float64)))


def tail_fit_loss(u, q, alpha, beta):
    """Mean over the supplied fractions of ``0.5 (log beta + log(c_u)/alpha - log q)^2``.

    ``alpha`` and ``beta`` may be Tensors of shape (B, 1) or (B,) for a batch of
    states with ``q`` of shape (B, k); then the result is the batch mean.
    Quantiles below ``Q_FLOOR`` are floored before the log.
    """
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        warnings.warn("nonpositive quantile estimates floored before log", RuntimeWarning, stacklevel=2)
    log_q = np.log(np.maximum(q, Q_FLOOR))
    log_cu = _log_cu(u)
    if isinstance(alpha, Tensor) or isinstance(beta, Tensor):
        a = alpha if isinstance(alpha, Tensor) else constant(alpha)
        b = beta if isinstance(beta, Tensor) else constant(beta)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
            b = b.reshape(-1, 1)
        resid = b.log() + constant(log_cu) / a - constant(log_q)
        return (resid * resid).mean() * 0.5
    resid = np.log(beta) + log_cu / np.asarray(alpha) - log_q
    return float(np.mean(0.5 * resid * resid))


def fit_weibull(u, q, steps: int = 4000, lr: float = 0.05, init=(1.0, 1.0)) -> tuple[WeibullParams, float]:
    """Gradient-descent fit of one (alpha, beta) pair through the network heads.

    alpha = 4 * sigmoid(a), beta = exp(b), matching :class:`TailNet`.
    """
    a0 = np.log(init[0] / (SIGMOID_SCALE - init[0]))
    raw = np.array([a0, np.log(init[1])])
    opt = Adam(2, lr=lr)
    loss_val = np.inf
    for _ in range(steps):
        with GradTape() as tape:
            w = tape.watch(raw)
            alpha = w[0:1].sigmoid() * SIGMOID_SCALE
            beta = w[1:2].exp()
            loss = tail_fit_loss(u, np.atleast_2d(q), alpha, beta)
        raw = opt.step(raw, tape.gradient(loss, w))
        loss_val = float(loss.value)
    alpha = float(SIGMOID_SCALE / (1.0 + np.exp(-raw[0])))
    return WeibullParams(alpha, float(np.exp(raw[1]))), loss_val


class TailNet:
    """Per-state Weibull parameters: alpha in (0, 4) and beta > 0."""

    def __init__(self, obs_dim: int, hidden, store: ParamStore, rng, prefix: str = "tail"):
        self.alpha_net = MLP(MLPSpec(obs_dim, tuple(hidden), 1, output_activation="scaled_sigmoid"),
                             store, f"{prefix}/alpha", rng)
        self.beta_net = MLP(MLPSpec(obs_dim, tuple(hidden), 1, output_activation="exp"),
                            store, f"{prefix}/beta", rng)
        self.prefix = prefix

    def __call__(self, obs, flat=None) -> tuple[Tensor, Tensor]:
        return self.alpha_net(obs, flat).reshape(-1), self.beta_net(obs, flat).reshape(-1)

    def params(self, obs, flat=None) -> tuple[np.ndarray, np.ndarray]:
        a, b = self(obs, flat)
        # keep strictly inside the open interval when the sigmoid saturates
        alpha = np.clip(a.value, 1e-6, SIGMOID_SCALE - 1e-6)
        return alpha, np.maximum(b.value, 1e-12)
