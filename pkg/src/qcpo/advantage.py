"""Quantile and reward advantages for the constrained PPO surrogate.

The quantile TD error ``c + gamma q_u(s') - q_u(s)`` is weighted by

    mu = p_{X(s')}((q_u(s) - c) / gamma) / (gamma * p_{X(s)}(q_u(s)))

which has expectation one under the behaviour policy.  Densities come from
the fitted Weibull tails; the raw ratio is too noisy to use directly, so the
advantage uses ``1 + clip(log mu, -c_clip, c_clip)`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tail import WeibullParams, weibull_logpdf

__all__ = [
    "AdvantageRecord",
    "log_mu_weight",
    "mu_weight",
    "smooth_mu",
    "quantile_at",
    "quantile_td_error",
    "quantile_advantage",
    "reward_advantage",
    "combined_advantage",
    "additional_cost_diag",
    "normalize",
    "ARG_FLOOR",
]

ARG_FLOOR = 1e-6


@dataclass
class AdvantageRecord:
    reward_adv: float
    quantile_adv: float
    combined_adv: float
    raw_mu: float
    smoothed_mu: float
    lam: float


def log_mu_weight(cost, q_s, alpha_num, beta_num, alpha_den, beta_den, gamma: float):
    """Elementwise ``log mu`` with numerator tail params (s') and denominator params."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    cost = np.asarray(cost, dtype=np.float64)
    q_s = np.asarray(q_s, dtype=np.float64)
    target = np.maximum((q_s - cost) / gamma, ARG_FLOOR)
    num = weibull_logpdf(target, alpha_num, beta_num)
    den = weibull_logpdf(np.maximum(q_s, ARG_FLOOR), alpha_den, beta_den)
    return num - np.log(gamma) - den


def mu_weight(cost: float, q_s: float, next_tail: WeibullParams, state_tail: WeibullParams,
              gamma: float, state=None) -> float:
    """Raw density-ratio weight for one transition."""
    lm = log_mu_weight(cost, q_s, next_tail.alpha, next_tail.beta, state_tail.alpha, state_tail.beta, gamma)
    mu = np.exp(lm)
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise FloatingPointError(f"non-finite density ratio at state {state!r}: log mu = {lm}")
    return float(mu) if np.ndim(mu) == 0 else mu


def smooth_mu(mu, c_clip: float = 0.5, log_mu=None):
    """``1 + clip(log mu, -c_clip, c_clip)``; pass ``log_mu`` to skip the log."""
    if log_mu is None:
        mu = np.asarray(mu, dtype=np.float64)
        if np.any(mu <= 0):
            raise ValueError("mu must be positive")
        log_mu = np.log(mu)
    out = 1.0 + np.clip(log_mu, -c_clip, c_clip)
    return float(out) if np.ndim(out) == 0 else out


def quantile_at(q: np.ndarray, fractions: np.ndarray, u: float) -> np.ndarray:
    """Read the ``u``-quantile off a grid of estimates, interpolating between fractions.

    An exact grid fraction (within 1e-9) is read directly.  Outside the grid the
    end value is used.
    """
    q = np.asarray(q, dtype=np.float64)
    hit = np.flatnonzero(np.abs(fractions - u) < 1e-9)
    if hit.size:
        return q[..., hit[0]]
    j = int(np.clip(np.searchsorted(fractions, u) - 1, 0, len(fractions) - 2))
    lo, hi = fractions[j], fractions[j + 1]
    w = float(np.clip((u - lo) / (hi - lo), 0.0, 1.0))
    return (1.0 - w) * q[..., j] + w * q[..., j + 1]


def quantile_td_error(cost, q_s, q_next, done, gamma: float):
    live = 1.0 - np.asarray(done, dtype=np.float64)
    return np.asarray(cost) + gamma * live * np.asarray(q_next) - np.asarray(q_s)


def quantile_advantage(cost, q_s, q_next, done, gamma: float, smoothed_mu=1.0):
    """``smoothed_mu * (c + gamma q_u(s') - q_u(s))``, zero bootstrap at terminals."""
    out = np.asarray(smoothed_mu) * quantile_td_error(cost, q_s, q_next, done, gamma)
    return float(out) if np.ndim(out) == 0 else out


def reward_advantage(reward, v_s, v_next, done, gamma: float):
    """One-step TD advantage ``r + gamma V(s') - V(s)``."""
    live = 1.0 - np.asarray(done, dtype=np.float64)
    out = np.asarray(reward) + gamma * live * np.asarray(v_next) - np.asarray(v_s)
    return float(out) if np.ndim(out) == 0 else out


def combined_advantage(reward_adv, quantile_adv, lam: float):
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    out = np.asarray(reward_adv) - lam * np.asarray(quantile_adv)
    return float(out) if np.ndim(out) == 0 else out


def additional_cost_diag(mu, cost, q_next, done, gamma: float):
    """Policy-dependent extra cost ``(mu - 1) (c + gamma q_u(s'))``."""
    live = 1.0 - np.asarray(done, dtype=np.float64)
    out = (np.asarray(mu) - 1.0) * (np.asarray(cost) + gamma * live * np.asarray(q_next))
    return float(out) if np.ndim(out) == 0 else out


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + eps)
