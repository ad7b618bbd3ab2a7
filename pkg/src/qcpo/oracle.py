"""Brute-force and Monte-Carlo references for the quantities the learner estimates.

Nothing here shares code with the training path: quantiles come from
``numpy.quantile`` with the inverted-CDF rule, pinball minimisers from a grid
scan, and cost-to-go distributions of small tabular MDPs from exact
enumeration.  Every routine takes an explicit seed and is pure given it.

Policies are plain callables ``policy(obs_batch, rng) -> actions`` so that
rollouts run many environments in lockstep with one policy call per step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .cmdp import EnvConfig, make_env

__all__ = [
    "constant_policy",
    "uniform_policy",
    "network_policy",
    "rollout_costs",
    "mc_quantile",
    "mc_outage",
    "binomial_band",
    "mean_pinball",
    "pinball_bruteforce_min",
    "TabularMDP",
    "UnknownDistributionError",
    "bernoulli_bandit",
    "bernoulli_chain",
    "deterministic_step",
    "correct_shift",
    "flipped_shift",
    "IdentityReport",
    "td_identity_check",
    "weighted_td_expectation",
    "duality_check",
    "CheckResult",
    "run_suite",
    "SUITE",
]


# -- policies ---------------------------------------------------------------------

def constant_policy(action: int) -> Callable:
    def policy(obs, rng):
        return np.full(len(obs), action, dtype=np.int64)
    return policy


def uniform_policy(n_actions: int) -> Callable:
    def policy(obs, rng):
        return rng.integers(n_actions, size=len(obs))
    return policy


def network_policy(categorical, flat=None) -> Callable:
    """Sample from a :class:`~qcpo.nnfa.CategoricalPolicy` with frozen weights."""
    flat = None if flat is None else np.array(flat, copy=True)

    def policy(obs, rng):
        p = np.exp(categorical.log_probs_np(obs, flat))
        cdf = np.cumsum(p, axis=1)
        draw = rng.random((len(obs), 1))
        return np.minimum((draw > cdf).sum(axis=1), p.shape[1] - 1)
    return policy


# -- Monte-Carlo rollouts ----------------------------------------------------------

def rollout_costs(policy: Callable, env_config: EnvConfig, n_rollouts: int, gamma: float = 0.99,
                  seed: int = 0, chunk: int = 2000) -> np.ndarray:
    """Discounted cost sums of ``n_rollouts`` episodes from the start state.

    Episode ``k`` always uses the ``k``-th seed of the stream, so results do not
    depend on ``chunk``.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be positive")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    seeds = np.random.default_rng(seed).integers(2**63, size=(n_rollouts, 2))
    out = np.empty(n_rollouts)
    for lo in range(0, n_rollouts, chunk):
        hi = min(lo + chunk, n_rollouts)
        envs = [make_env(env_config) for _ in range(hi - lo)]
        obs = np.stack([e.reset(int(s)) for e, s in zip(envs, seeds[lo:hi, 0])])
        # one action stream per chunk, seeded from its first episode
        rng = np.random.default_rng(int(seeds[lo, 1]))
        terms = [[] for _ in range(hi - lo)]
        live = np.arange(hi - lo)
        disc = 1.0
        while live.size:
            actions = policy(obs[live], rng)
            still = []
            for k, a in zip(live, actions):
                tr = envs[k].step(a)
                terms[k].append(disc * tr.cost)
                obs[k] = tr.next_state
                if not (tr.done or tr.truncated):
                    still.append(k)
            live = np.asarray(still, dtype=np.int64)
            disc *= gamma
        out[lo:hi] = [math.fsum(t) for t in terms]
    return out


def mc_quantile(policy: Callable, env_config: EnvConfig, u: float, n_rollouts: int = 100_000,
                gamma: float = 0.99, seed: int = 0, samples: Optional[np.ndarray] = None) -> float:
    """Empirical ``inf{x : F_n(x) >= u}`` of the start-state discounted cost sum."""
    if n_rollouts < 100:
        raise ValueError("mc_quantile needs at least 100 rollouts")
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    x = rollout_costs(policy, env_config, n_rollouts, gamma, seed) if samples is None else np.asarray(samples)
    return float(np.quantile(x, u, method="inverted_cdf"))


def mc_outage(policy: Callable, env_config: EnvConfig, d_th: float, n_rollouts: int = 100_000,
              gamma: float = 0.99, seed: int = 0, samples: Optional[np.ndarray] = None) -> float:
    """Fraction of episodes whose discounted cost sum exceeds ``d_th``."""
    x = rollout_costs(policy, env_config, n_rollouts, gamma, seed) if samples is None else np.asarray(samples)
    return float(np.mean(x > d_th))


def binomial_band(p: float, n: int, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(max(p * (1.0 - p), 0.0) / n)


# -- pinball loss by exhaustive search ---------------------------------------------

def mean_pinball(samples, q, u: float) -> np.ndarray:
    """Mean of ``(u - 1{x < q}) (x - q)`` over samples, for each candidate ``q``."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 1)
    q = np.atleast_1d(np.asarray(q, dtype=np.float64)).reshape(1, -1)
    d = x - q
    return np.mean(np.where(d < 0, (u - 1.0) * d, u * d), axis=0)


def pinball_bruteforce_min(samples, u: float, grid: float = 0.01) -> float:
    """Grid point in ``[min, max]`` with the smallest mean pinball loss.

    Ties resolve to the lowest grid point.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("samples must be non-empty")
    if grid <= 0:
        raise ValueError("grid resolution must be positive")
    lo, hi = float(x.min()), float(x.max())
    cands = lo + grid * np.arange(int(math.floor((hi - lo) / grid + 1e-9)) + 1)
    losses = np.concatenate([mean_pinball(x, c, u) for c in np.array_split(cands, max(1, cands.size // 512))])
    # the objective is piecewise linear with flat stretches; treat rounding-level gaps as ties
    best = losses.min()
    return float(cands[int(np.flatnonzero(losses <= best + 1e-12 * max(1.0, abs(best)))[0])])


# -- tabular MDPs with exact cost-to-go distributions ----------------------------

class UnknownDistributionError(ValueError):
    """The MDP's cost-to-go distribution cannot be enumerated exactly."""


@dataclass
class TabularMDP:
    """Finite MDP with deterministic transitions and finitely supported costs.

    ``transitions[s][a] = (next_state or None, [(cost, prob), ...])``; ``None``
    ends the episode.  ``policy[s]`` holds action probabilities.
    """

    transitions: dict
    policy: dict
    gamma: float = 0.9

    def __post_init__(self):
        for s, acts in self.transitions.items():
            if s not in self.policy or len(self.policy[s]) != len(acts):
                raise ValueError(f"policy does not cover the actions of state {s!r}")
            if not np.isclose(sum(self.policy[s]), 1.0):
                raise ValueError(f"policy probabilities at {s!r} do not sum to 1")
            for nxt, costs in acts:
                if nxt is not None and nxt not in self.transitions:
                    raise ValueError(f"unknown next state {nxt!r}")
                if any(c < 0 for c, _ in costs) or not np.isclose(sum(p for _, p in costs), 1.0):
                    raise ValueError(f"bad cost distribution at {s!r}")
        self._pmf: dict = {}

    def outcomes(self, s):
        """All ``(prob, cost, next_state)`` one-step outcomes from ``s`` under the policy."""
        out = []
        for pa, (nxt, costs) in zip(self.policy[s], self.transitions[s]):
            for c, pc in costs:
                if pa * pc > 0:
                    out.append((pa * pc, float(c), nxt))
        return out

    def pmf(self, s, _path=()) -> tuple[np.ndarray, np.ndarray]:
        """Support and probabilities of the discounted cost-to-go from ``s``."""
        if s is None:
            return np.zeros(1), np.ones(1)
        if s in self._pmf:
            return self._pmf[s]
        if s in _path:
            raise UnknownDistributionError(f"state {s!r} lies on a cycle; cost-to-go has infinite support")
        table: dict[float, float] = {}
        for p, c, nxt in self.outcomes(s):
            xs, ps = self.pmf(nxt, _path + (s,))
            for x, px in zip(xs, ps):
                key = round(c + self.gamma * x, 12)
                table[key] = table.get(key, 0.0) + p * px
        support = np.array(sorted(table))
        probs = np.array([table[k] for k in support])
        self._pmf[s] = (support, probs)
        return self._pmf[s]

    def quantile(self, s, u: float) -> float:
        xs, ps = self.pmf(s)
        return float(xs[np.searchsorted(np.cumsum(ps), u - 1e-12)])

    def min_gap(self) -> float:
        """Smallest gap between support points over every cost-to-go distribution."""
        gaps = []
        for s in self.transitions:
            xs, _ = self.pmf(s)
            if xs.size > 1:
                gaps.append(np.min(np.diff(xs)))
        return float(min(gaps)) if gaps else 1.0


def _kernel_density(x, support, probs, h):
    x = np.asarray(x, dtype=np.float64)[..., None]
    z = (x - support) / h
    return np.sum(probs * np.exp(-0.5 * z * z), axis=-1) / (h * math.sqrt(2.0 * math.pi))


def bernoulli_bandit() -> TabularMDP:
    """One decision, two actions, Bernoulli costs, then the episode ends."""
    return TabularMDP(
        transitions={"s": [(None, [(0.0, 0.7), (1.0, 0.3)]), (None, [(0.5, 0.4), (1.5, 0.6)])]},
        policy={"s": [0.5, 0.5]},
        gamma=0.9,
    )


def bernoulli_chain() -> TabularMDP:
    """Three states in a row; each has a cheap-but-risky and a flat action."""
    risky, flat = [(0.2, 0.8), (2.0, 0.2)], [(0.7, 1.0)]
    return TabularMDP(
        transitions={
            "s0": [("s1", risky), ("s1", flat)],
            "s1": [("s2", risky), ("s2", [(0.3, 0.5), (1.1, 0.5)])],
            "s2": [(None, risky), (None, flat)],
        },
        policy={"s0": [0.6, 0.4], "s1": [0.5, 0.5], "s2": [0.3, 0.7]},
        gamma=0.9,
    )


def deterministic_step(cost: float = 1.0) -> TabularMDP:
    """A single state that pays a fixed cost and ends; its cost-to-go is a point mass."""
    return TabularMDP(transitions={"s": [(None, [(cost, 1.0)])]}, policy={"s": [1.0]}, gamma=0.9)


def correct_shift(q, c, gamma):
    return (q - c) / gamma


def flipped_shift(q, c, gamma):
    """Deliberately wrong sign on the cost; used to confirm the check can fail."""
    return (q + c) / gamma


@dataclass
class IdentityReport:
    state: str
    u: float
    quantile: float
    bandwidth: float
    lhs: float = float("nan")
    rhs: float = float("nan")
    z_score: float = float("nan")
    mu_mean: float = float("nan")
    mu_z_score: float = float("nan")
    status: str = "pass"  # pass | fail | degenerate
    n_mc: int = 0

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def td_identity_check(mdp: TabularMDP, state, u: float = 0.9, n_mc: int = 1_000_000, seed: int = 0,
                      shift: Callable = correct_shift, z_max: float = 3.0) -> IdentityReport:
    """Monte-Carlo test of the density Bellman identity and of ``E[mu] = 1``.

    The identity ``E[p_{X(s')}((x - c) / gamma)] = gamma p_{X(s)}(x)`` is tested at
    ``x = q_u(s)``.  Both densities are Gaussian-kernel smoothings of the exact
    PMFs; the ``s`` side uses bandwidth ``gamma * h`` so that smoothing commutes
    with the Bellman map and the identity stays exact.  ``mu`` is the ratio of
    the two sides per sampled transition.
    """
    if state not in mdp.transitions:
        raise UnknownDistributionError(f"state {state!r} not in the MDP")
    xs, ps = mdp.pmf(state)
    q = mdp.quantile(state, u)
    h = 0.25 * mdp.min_gap()
    report = IdentityReport(state=str(state), u=u, quantile=q, bandwidth=h, n_mc=n_mc)
    if xs.size == 1:
        report.status = "degenerate"
        return report

    outcomes = mdp.outcomes(state)
    probs = np.array([o[0] for o in outcomes])
    f = np.array([_kernel_density(shift(q, c, mdp.gamma), *mdp.pmf(nxt), h) for _, c, nxt in outcomes])
    rhs = mdp.gamma * float(_kernel_density(q, xs, ps, mdp.gamma * h))
    counts = np.random.default_rng(seed).multinomial(n_mc, probs / probs.sum())

    def mean_and_z(values, target):
        m = float(np.sum(counts * values) / n_mc)
        var = float(np.sum(counts * (values - m) ** 2) / (n_mc - 1))
        se = math.sqrt(var / n_mc)
        z = (m - target) / se if se > 0 else (0.0 if np.isclose(m, target) else math.inf)
        return m, z

    report.lhs, report.z_score = mean_and_z(f, rhs)
    report.rhs = rhs
    report.mu_mean, report.mu_z_score = mean_and_z(f / rhs, 1.0)
    ok = abs(report.z_score) <= z_max and abs(report.mu_z_score) <= z_max
    report.status = "pass" if ok else "fail"
    return report


def weighted_td_expectation(mdp: TabularMDP, state, u: float = 0.9, n_mc: int = 1_000_000,
                            seed: int = 0) -> tuple[float, float]:
    """Mean and standard error of ``mu * (c + gamma q_u(s') - q_u(s))`` from ``state``.

    Reported raw: how close to zero it should be depends on constants that need
    the true CDFs.
    """
    q = mdp.quantile(state, u)
    h = 0.25 * mdp.min_gap()
    xs, ps = mdp.pmf(state)
    den = mdp.gamma * float(_kernel_density(q, xs, ps, mdp.gamma * h))
    outcomes = mdp.outcomes(state)
    probs = np.array([o[0] for o in outcomes])
    vals = []
    for _, c, nxt in outcomes:
        mu = float(_kernel_density(correct_shift(q, c, mdp.gamma), *mdp.pmf(nxt), h)) / den
        q_next = 0.0 if nxt is None else mdp.quantile(nxt, u)
        vals.append(mu * (c + mdp.gamma * q_next - q))
    vals = np.array(vals)
    counts = np.random.default_rng(seed).multinomial(n_mc, probs / probs.sum())
    m = float(np.sum(counts * vals) / n_mc)
    se = math.sqrt(float(np.sum(counts * (vals - m) ** 2)) / (n_mc - 1) / n_mc)
    return m, se


# -- the verification suite ---------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    data: dict = field(default_factory=dict)


def _check_td_identity() -> CheckResult:
    reports = [td_identity_check(bernoulli_bandit(), "s", 0.9, seed=1)]
    chain = bernoulli_chain()
    reports += [td_identity_check(chain, s, u, seed=2) for s in ("s0", "s1") for u in (0.5, 0.9)]
    degenerate = td_identity_check(deterministic_step(), "s")
    ok = all(r.passed for r in reports) and degenerate.status == "degenerate"
    worst = max(max(abs(r.z_score), abs(r.mu_z_score)) for r in reports)
    return CheckResult("td_identity", ok, f"max |z| = {worst:.2f} over {len(reports)} checks",
                       {"reports": [asdict(r) for r in reports]})


def _check_mutation() -> CheckResult:
    r = td_identity_check(bernoulli_chain(), "s0", 0.9, seed=3, shift=flipped_shift)
    return CheckResult("mutation", r.status == "fail",
                       f"flipped cost sign gives z = {r.z_score:.1f}, mu z = {r.mu_z_score:.1f}", asdict(r))


def _check_pinball() -> CheckResult:
    rng = np.random.default_rng(4)
    x = rng.exponential(size=5000)
    errs = []
    for u in (0.1, 0.5, 0.9):
        brute = pinball_bruteforce_min(x, u, 0.001)
        exact = float(np.quantile(x, u, method="inverted_cdf"))
        errs.append(abs(brute - exact))
    ok = max(errs) <= 0.001 + 1e-12
    return CheckResult("pinball", ok, f"max |grid argmin - order statistic| = {max(errs):.4f}")


def _check_weibull() -> CheckResult:
    from .tail import WeibullParams, fit_weibull, weibull_quantile

    true = WeibullParams(1.5, 2.0)
    u = (2.0 * np.arange(18, 26) - 1.0) / 50.0  # the eight largest of 25 midpoint fractions
    p_exact, _ = fit_weibull(u, weibull_quantile(u, true))
    sample = np.random.default_rng(5).weibull(1.5, size=10_000) * 2.0
    p_emp, _ = fit_weibull(u, np.quantile(sample, u))
    ok = (abs(p_exact.alpha - 1.5) <= 0.05 and abs(p_exact.beta - 2.0) <= 0.05
          and abs(p_emp.alpha - 1.5) <= 0.15 and abs(p_emp.beta - 2.0) <= 0.2)
    return CheckResult("weibull", ok,
                       f"exact ({p_exact.alpha:.3f}, {p_exact.beta:.3f}); "
                       f"sampled ({p_emp.alpha:.3f}, {p_emp.beta:.3f})")


def duality_check(policy: Callable, env_config: EnvConfig, us=(0.5, 0.9), n_quantile: int = 20_000,
                  n_outage: int = 10_000, gamma: float = 0.99, seed: int = 0) -> list[dict]:
    """Outage at the estimated ``u``-quantile against ``1 - u``.

    The quantile and the outage come from independent rollout streams; the
    band is the binomial 3-sigma of the outage estimate alone, so
    ``n_quantile`` should be several times ``n_outage``.
    """
    x_q = rollout_costs(policy, env_config, n_quantile, gamma, seed)
    x_o = rollout_costs(policy, env_config, n_outage, gamma, seed + 1)
    rows = []
    for u in us:
        q = mc_quantile(policy, env_config, u, samples=x_q)
        out = mc_outage(policy, env_config, q, samples=x_o)
        band = binomial_band(1.0 - u, n_outage)
        rows.append({"u": u, "quantile": q, "outage": out, "band": band,
                     "atom": float(np.mean(x_o == q)), "passed": abs(out - (1.0 - u)) <= band})
    return rows


def _check_duality() -> CheckResult:
    rows = duality_check(uniform_policy(4), EnvConfig("hazard_grid"), seed=6)
    worst = max(abs(r["outage"] - (1.0 - r["u"])) / r["band"] * 3.0 for r in rows)
    return CheckResult("duality", all(r["passed"] for r in rows), f"worst deviation {worst:.2f} sigma",
                       {"rows": rows})


SUITE = {
    "td_identity": _check_td_identity,
    "mutation": _check_mutation,
    "pinball": _check_pinball,
    "weibull": _check_weibull,
    "duality": _check_duality,
}


def run_suite(only=None) -> list[CheckResult]:
    names = list(SUITE) if not only else list(only)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {sorted(SUITE)}")
    return [SUITE[n]() for n in names]
