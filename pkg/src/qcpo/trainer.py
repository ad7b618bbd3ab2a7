"""QCPO training loop and its expectation-constrained and unconstrained variants.

One iteration:

1. collect ``batch_steps`` transitions with the current policy;
2. ``epochs_per_batch`` epochs fitting the reward value net, the cost quantile
   net and the Weibull tail nets;
3. freeze the fitted critics and compute advantages;
4. ``epochs_per_batch`` epochs of the clipped PPO surrogate;
5. update the Lagrange multiplier from the recent episode cost sums.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import advantage as adv
from .autodiff import GradTape, Tensor, constant, minimum
from .cmdp import Collector, EnvConfig, TrajectoryBatch, make_env
from .critic import (QuantileNet, ValueNet, cost_value_from_quantiles, cost_value_loss, crossing_rate,
                     quantile_td_loss, reward_value_loss)
from .lagrange import LagrangeState, update as lagrange_update
from .nnfa import Adam, CategoricalPolicy, GaussianPolicy, ParamStore
from .tail import TailNet, tail_fit_loss

log = logging.getLogger(__name__)

__all__ = [
    "TrainerConfig",
    "IterationMetrics",
    "Agent",
    "Trainer",
    "ppo_policy_loss",
    "discounted_to_go",
    "subtrajectories",
    "run",
    "METRIC_COLUMNS",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
MODES = ("qcpo", "expcp", "ppo")


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 1e-4
    n_q: int = 25
    tail_k: int = 8
    r_clip: float = 0.1
    c_clip: float = 0.5
    eta: float = 0.1
    kappa: float = 1.0
    batch_steps: int = 4000
    subtraj_len: int = 100
    epochs_per_batch: int = 8
    minibatches: int = 1
    max_env_steps: int = 2_000_000
    d_th: float = 10.0
    eps0: float = 0.1
    mode: str = "qcpo"
    seed: int = 0
    hidden: tuple = (64, 64)
    window: int = 100
    lam_init: float = 0.0
    freeze_lambda: bool = False
    normalize_advantages: bool = True
    entropy_coef: float = 0.0
    mu_denominator: str = "next"  # next: s' params in both densities; current: s params below
    discounted_constraint: bool = True
    policy_warmup_iters: int = 0  # iterations of critic-only fitting before the first policy update

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.r_clip <= 0 or self.c_clip <= 0 or self.eta <= 0:
            raise ValueError("r_clip, c_clip and eta must be positive")
        if not 0.0 < self.eps0 < 1.0:
            raise ValueError(f"eps0 must lie in (0, 1), got {self.eps0}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mu_denominator not in ("next", "current"):
            raise ValueError("mu_denominator must be 'next' or 'current'")
        if not 2 <= self.tail_k <= self.n_q:
            raise ValueError("tail_k must lie in [2, n_q]")
        if self.policy_warmup_iters < 0:
            raise ValueError("policy_warmup_iters must be nonnegative")
        if self.batch_steps < 1 or self.epochs_per_batch < 1 or self.minibatches < 1:
            raise ValueError("batch_steps, epochs_per_batch and minibatches must be positive")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


METRIC_COLUMNS = (
    "iter", "env_steps", "avg_return_100ep", "outage_prob_100ep", "avg_cost_sum_100ep", "lambda",
    "emp_quantile", "policy_loss", "quantile_loss", "value_loss", "tail_loss", "mean_kl", "qx_rate",
)


@dataclass
class IterationMetrics:
    iter: int
    env_steps: int
    avg_return_100ep: float
    outage_prob_100ep: float
    avg_cost_sum_100ep: float
    lam: float
    empirical_quantile: float
    policy_loss: float
    quantile_loss: float
    value_loss: float
    tail_loss: float
    mean_kl_old_new: float
    quantile_crossing_rate: float
    # mean |log mu| gap between the two denominator variants; not part of the CSV row
    mu_variant_gap: float = float("nan")
    c_tilde_mean: float = float("nan")

    def row(self) -> list:
        return [self.iter, self.env_steps, self.avg_return_100ep, self.outage_prob_100ep,
                self.avg_cost_sum_100ep, self.lam, self.empirical_quantile, self.policy_loss,
                self.quantile_loss, self.value_loss, self.tail_loss, self.mean_kl_old_new,
                self.quantile_crossing_rate]


# -- helpers -----------------------------------------------------------------------


def discounted_to_go(values: np.ndarray, ends: np.ndarray, bootstrap: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted sums to the end of each episode segment.

    ``ends[t]`` marks the last transition of an episode (no bootstrap).  The final
    transition of the batch bootstraps from ``bootstrap[-1]`` if it is not an end.
    """
    out = np.empty_like(values, dtype=np.float64)
    acc = 0.0 if ends[-1] else float(bootstrap[-1])
    for t in range(len(values) - 1, -1, -1):
        if ends[t]:
            acc = 0.0
        acc = values[t] + gamma * acc
        out[t] = acc
    return out


def subtrajectories(n: int, length: int) -> list[np.ndarray]:
    """Split ``range(n)`` into consecutive index blocks of ``length``; the tail block may be short."""
    length = max(1, min(length, n))
    return [np.arange(i, min(i + length, n)) for i in range(0, n, length)]


def ppo_policy_loss(logp_new: Tensor, logp_old, advantages, r_clip: float) -> Tensor:
    """``-mean(min(clip(ratio, 1 +- r_clip) A, ratio A))``."""
    if not isinstance(logp_new, Tensor):
        logp_new = constant(logp_new)
    ratio = (logp_new - constant(logp_old)).exp()
    if not np.all(np.isfinite(ratio.value)):
        raise FloatingPointError("non-finite importance ratio in policy loss")
    a = constant(advantages)
    surr = minimum(ratio.clip(1.0 - r_clip, 1.0 + r_clip) * a, ratio * a)
    return -surr.mean()


# -- agent ----------------------------------------------------------------------------


class Agent:
    """The four parameter groups: policy, value, quantiles, Weibull tail."""

    GROUPS = ("pi", "v", "q", "tail")

    def __init__(self, obs_dim: int, n_actions: int, config: TrainerConfig, discrete: bool = True,
                 seed: Optional[int] = None):
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.config = config
        self.obs_dim, self.n_actions = obs_dim, n_actions
        self.stores = {g: ParamStore() for g in self.GROUPS}
        if discrete:
            self.policy = CategoricalPolicy(obs_dim, n_actions, config.hidden, self.stores["pi"], rng)
        else:
            self.policy = GaussianPolicy(obs_dim, n_actions, config.hidden, self.stores["pi"], rng)
        self.value = ValueNet(obs_dim, config.hidden, self.stores["v"], rng)
        self.quantile = QuantileNet(obs_dim, config.n_q, config.hidden, self.stores["q"], rng)
        self.tail = TailNet(obs_dim, config.hidden, self.stores["tail"], rng)
        self.opts = {g: Adam(len(self.stores[g]), lr=config.lr) for g in self.GROUPS}

    def act(self, obs, rng):
        return self.policy.sample(obs, rng)

    def step_group(self, group: str, loss_fn) -> float:
        store = self.stores[group]
        with GradTape() as tape:
            w = tape.watch(store.values)
            loss = loss_fn(w)
        if not np.isfinite(loss.value):
            raise FloatingPointError(f"non-finite {group} loss")
        store.values = self.opts[group].step(store.values, tape.gradient(loss, w), store=store)
        return float(loss.value)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {g: s.values.copy() for g, s in self.stores.items()}

    # checkpoint: versioned header, flat vector, layout manifest
    def save(self, path: str, extra: Optional[dict] = None) -> None:
        manifest, chunks, offset = [], [], 0
        for g in self.GROUPS:
            store = self.stores[g]
            for name, (start, shape) in store.layout.items():
                manifest.append({"group": g, "name": name, "offset": offset + start, "shape": list(shape)})
            chunks.append(store.values)
            offset += len(store)
        header = {"format": "qcpo-checkpoint", "version": CHECKPOINT_VERSION, "obs_dim": self.obs_dim,
                  "n_actions": self.n_actions, "discrete": isinstance(self.policy, CategoricalPolicy),
                  "config": _jsonable(asdict(self.config)), "extra": extra or {}}
        with open(path, "wb") as fh:
            np.savez(fh, header=json.dumps(header), params=np.concatenate(chunks), layout=json.dumps(manifest))

    @classmethod
    def load(cls, path: str) -> "Agent":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            params = data["params"]
            manifest = json.loads(str(data["layout"]))
        if header.get("format") != "qcpo-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint header {header.get('format')!r} v{header.get('version')}")
        config = TrainerConfig(**header["config"])
        agent = cls(header["obs_dim"], header["n_actions"], config, discrete=header["discrete"])
        agent.extra = header.get("extra", {})
        for entry in manifest:
            store = agent.stores[entry["group"]]
            if entry["name"] not in store.layout or list(store.layout[entry["name"]][1]) != entry["shape"]:
                raise ValueError(f"{path}: layout mismatch at {entry['name']}")
            lo, hi = store.bounds(entry["name"])
            size = hi - lo
            store.values[lo:hi] = params[entry["offset"]:entry["offset"] + size]
        return agent


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- trainer ------------------------------------------------------------------------------


class Trainer:
    def __init__(self, config: TrainerConfig, env_config: EnvConfig):
        self.config = config
        self.env_config = env_config
        self.env = make_env(env_config)
        self.agent = Agent(self.env.obs_dim, self.env.n_actions, config, discrete=self.env.discrete)
        self.collector = Collector(self.env, config.gamma, config.seed + 1)
        self.lagrange = LagrangeState(lam=config.lam_init, eta=config.eta, d_th=config.d_th, eps0=config.eps0,
                                      window=config.window,
                                      statistic="mean" if config.mode == "expcp" else "quantile",
                                      frozen=config.freeze_lambda or config.mode == "ppo")
        self.iteration = 0
        self.env_steps = 0
        self.recent_returns: deque = deque(maxlen=100)
        self.recent_costs: deque = deque(maxlen=100)
        self.recent_first_actions: deque = deque(maxlen=100)
        self.u_constraint = 1.0 - config.eps0

    # -- pieces ------------------------------------------------------------------
    def critic_targets(self, b: TrajectoryBatch) -> dict:
        cfg, ag = self.config, self.agent
        ends = b.episode_end
        v_next_last = ag.value.values(b.next_obs[-1:])
        q_next_old = ag.quantile.values(b.next_obs)  # frozen copy of psi for the TD target
        c_next_last = cost_value_from_quantiles(q_next_old[-1:])
        returns = discounted_to_go(b.rewards, ends, np.atleast_1d(v_next_last), cfg.gamma)
        cost_to_go = discounted_to_go(b.costs, ends, np.atleast_1d(c_next_last), cfg.gamma)
        return {"returns": returns, "cost_to_go": cost_to_go, "q_next_old": q_next_old, "ends": ends}

    def fit_critics(self, b: TrajectoryBatch, targets: dict) -> dict:
        cfg, ag = self.config, self.agent
        blocks = subtrajectories(len(b), cfg.subtraj_len)
        rng = np.random.default_rng([cfg.seed, self.iteration, 7])
        losses = {"value": [], "quantile": [], "tail": []}
        k = cfg.tail_k
        u_tail = ag.quantile.fractions[-k:]
        for _ in range(cfg.epochs_per_batch):
            for idx in self._minibatches(blocks, rng):
                obs = b.obs[idx]
                losses["value"].append(ag.step_group(
                    "v", lambda w: reward_value_loss(ag.value(obs, w), targets["returns"][idx])))

                def q_loss(w):
                    q = ag.quantile(obs, w)
                    return cost_value_loss(q, targets["cost_to_go"][idx]) + quantile_td_loss(
                        q, targets["q_next_old"][idx], b.costs[idx], targets["ends"][idx], cfg.gamma, cfg.kappa,
                        ag.quantile.fractions, dtype=np.float32)

                losses["quantile"].append(ag.step_group("q", q_loss))
                q_top = ag.quantile.values(obs)[:, -k:]

                def t_loss(w):
                    alpha, beta = ag.tail(obs, w)
                    return tail_fit_loss(u_tail, q_top, alpha, beta)

                losses["tail"].append(ag.step_group("tail", t_loss))
        return {name: float(np.mean(v)) for name, v in losses.items()}

    def _minibatches(self, blocks: list, rng) -> Iterator[np.ndarray]:
        m = min(self.config.minibatches, len(blocks))
        if m == 1:
            yield np.concatenate(blocks)
            return
        order = rng.permutation(len(blocks))
        for part in np.array_split(order, m):
            yield np.concatenate([blocks[i] for i in part])

    def advantages(self, b: TrajectoryBatch, lam: float) -> dict:
        cfg, ag = self.config, self.agent
        ends = b.episode_end
        v_s, v_next = ag.value.values(b.obs), ag.value.values(b.next_obs)
        a_r = adv.reward_advantage(b.rewards, v_s, v_next, ends, cfg.gamma)
        out = {"reward": a_r}
        if cfg.mode == "ppo":
            combined = a_r
        else:
            q_s, q_next = ag.quantile.values(b.obs), ag.quantile.values(b.next_obs)
            if cfg.mode == "expcp":
                c_s, c_next = cost_value_from_quantiles(q_s), cost_value_from_quantiles(q_next)
                a_c = adv.quantile_td_error(b.costs, c_s, c_next, ends, cfg.gamma)
                out["cost"] = a_c
                combined = adv.combined_advantage(a_r, a_c, lam)
            else:
                qs_u = adv.quantile_at(q_s, ag.quantile.fractions, self.u_constraint)
                qn_u = adv.quantile_at(q_next, ag.quantile.fractions, self.u_constraint)
                alpha_n, beta_n = ag.tail.params(b.next_obs)
                alpha_s, beta_s = ag.tail.params(b.obs)
                den, alt = ((alpha_n, beta_n), (alpha_s, beta_s))
                if cfg.mu_denominator == "current":
                    den, alt = alt, den
                log_mu = adv.log_mu_weight(b.costs, qs_u, alpha_n, beta_n, *den, cfg.gamma)
                log_mu_alt = adv.log_mu_weight(b.costs, qs_u, alpha_n, beta_n, *alt, cfg.gamma)
                live = ~ends
                out["mu_variant_gap"] = float(np.mean(np.abs(log_mu - log_mu_alt)[live])) if live.any() else 0.0
                # the cost-to-go after a terminal transition is exactly zero; no density ratio applies
                log_mu = np.where(ends, 0.0, log_mu)
                if not np.all(np.isfinite(log_mu)):
                    bad = int(np.flatnonzero(~np.isfinite(log_mu))[0])
                    raise FloatingPointError(f"non-finite density ratio at batch index {bad}")
                smoothed = adv.smooth_mu(None, cfg.c_clip, log_mu=log_mu)
                a_q = adv.quantile_advantage(b.costs, qs_u, qn_u, ends, cfg.gamma, smoothed)
                # raw mu can be astronomically large on a poor tail fit; cap it for the diagnostic only
                c_tilde = adv.additional_cost_diag(np.exp(np.minimum(log_mu, 50.0)), b.costs, qn_u, ends, cfg.gamma)
                out.update(quantile=a_q, log_mu=log_mu, smoothed_mu=smoothed, c_tilde=c_tilde)
                combined = adv.combined_advantage(a_r, a_q, lam)
        out["combined"] = adv.normalize(combined) if cfg.normalize_advantages else np.asarray(combined)
        return out

    def update_policy(self, b: TrajectoryBatch, advantages: np.ndarray) -> tuple[float, float]:
        cfg, ag = self.config, self.agent
        old = ag.stores["pi"].values.copy()
        blocks = subtrajectories(len(b), cfg.subtraj_len)
        rng = np.random.default_rng([cfg.seed, self.iteration, 11])
        losses = []
        for _ in range(cfg.epochs_per_batch):
            for idx in self._minibatches(blocks, rng):
                obs, acts = b.obs[idx], b.actions[idx]

                def pi_loss(w):
                    lp = ag.policy.log_prob(obs, acts, w)
                    loss = ppo_policy_loss(lp, b.logp[idx], advantages[idx], cfg.r_clip)
                    if cfg.entropy_coef > 0 and ag.policy.discrete:
                        logits = ag.policy.log_probs(obs, w)
                        ent = -(logits.exp() * logits).sum(axis=-1).mean()
                        loss = loss - ent * cfg.entropy_coef
                    return loss

                losses.append(ag.step_group("pi", pi_loss))
        kl = ag.policy.mean_kl(b.obs, old, ag.stores["pi"].values)
        return float(np.mean(losses)), kl

    # -- one iteration -----------------------------------------------------------------
    def train_iteration(self) -> IterationMetrics:
        cfg = self.config
        b = self.collector.collect(self.agent.act, cfg.batch_steps)
        self.env_steps += len(b)
        targets = self.critic_targets(b)
        critic_losses = self.fit_critics(b, targets)
        advs = self.advantages(b, self.lagrange.lam)
        if self.iteration >= cfg.policy_warmup_iters:
            policy_loss, kl = self.update_policy(b, advs["combined"])
        else:
            policy_loss, kl = 0.0, 0.0
        lam_used = self.lagrange.lam
        costs = b.episode_costs if cfg.discounted_constraint else b.episode_costs_undiscounted
        self.lagrange.record(costs)
        self.lagrange = lagrange_update(self.lagrange)
        self.recent_returns.extend(b.episode_returns)
        self.recent_costs.extend(costs)
        self.recent_first_actions.extend(b.episode_first_actions)
        recent = np.asarray(self.recent_costs, dtype=np.float64)
        m = IterationMetrics(
            iter=self.iteration,
            env_steps=self.env_steps,
            avg_return_100ep=float(np.mean(self.recent_returns)) if self.recent_returns else 0.0,
            outage_prob_100ep=float(np.mean(recent > cfg.d_th)) if recent.size else 0.0,
            avg_cost_sum_100ep=float(recent.mean()) if recent.size else 0.0,
            lam=lam_used,
            empirical_quantile=_finite(self.lagrange.last_estimate),
            policy_loss=policy_loss,
            quantile_loss=critic_losses["quantile"],
            value_loss=critic_losses["value"],
            tail_loss=critic_losses["tail"],
            mean_kl_old_new=kl,
            quantile_crossing_rate=crossing_rate(self.agent.quantile.values(b.obs)),
            mu_variant_gap=advs.get("mu_variant_gap", float("nan")),
            c_tilde_mean=float(np.mean(advs["c_tilde"])) if "c_tilde" in advs else float("nan"),
        )
        for name in ("policy_loss", "quantile_loss", "value_loss", "tail_loss"):
            if not math.isfinite(getattr(m, name)):
                raise FloatingPointError(f"non-finite {name} at iteration {self.iteration}")
        self.iteration += 1
        log.debug("iter %d lam %.3f outage %.3f mu gap %.3g c_tilde %.3g",
                  m.iter, m.lam, m.outage_prob_100ep, m.mu_variant_gap, m.c_tilde_mean)
        return m

    def run(self, sink=None, max_env_steps: Optional[int] = None) -> list[IterationMetrics]:
        limit = self.config.max_env_steps if max_env_steps is None else max_env_steps
        history = []
        while self.env_steps + self.config.batch_steps <= limit:
            m = self.train_iteration()
            history.append(m)
            if sink is not None:
                sink(m)
        return history


def _finite(x: float) -> float:
    return float(x) if math.isfinite(x) else 0.0


def run(config: TrainerConfig, env_config: EnvConfig, sink=None) -> list[IterationMetrics]:
    """Train until ``config.max_env_steps`` and return the metric history."""
    return Trainer(config, env_config).run(sink)
