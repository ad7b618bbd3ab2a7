"""Constrained MDP primitives and the two desk-scale environments.

Both environments have deterministic state dynamics; all randomness enters
through the cost draw, so a cloned environment given the same action from the
same state always lands in the same next state.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Transition",
    "Trajectory",
    "TrajectoryBatch",
    "EnvConfig",
    "EpisodeFinished",
    "TwoPathEnv",
    "HazardGridEnv",
    "make_env",
    "episode_cost_sum",
    "collect_batch",
    "rollout_episode",
]


class EpisodeFinished(RuntimeError):
    """Raised when ``step`` is called on an episode that already ended."""


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float
    cost: float
    next_state: np.ndarray
    done: bool
    truncated: bool = False

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError(f"negative cost {self.cost}")


def episode_cost_sum(costs, gamma: float = 1.0) -> float:
    """Discounted cost sum ``sum_t gamma**t c_t`` of a trajectory or cost list."""
    if isinstance(costs, Trajectory):
        costs = [t.cost for t in costs.transitions]
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("trajectory is empty")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    return math.fsum(costs * gamma ** np.arange(costs.size))


@dataclass
class Trajectory:
    transitions: list[Transition]
    gamma: float = 0.99

    @property
    def discounted_cost_sum(self) -> float:
        return episode_cost_sum([t.cost for t in self.transitions], self.gamma)

    @property
    def undiscounted_return(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    @property
    def undiscounted_cost(self) -> float:
        return float(sum(t.cost for t in self.transitions))

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass
class EnvConfig:
    env_id: str = "two_path"  # two_path | hazard_grid
    max_steps: int = 100
    seed: int = 0
    # two_path
    path_length: int = 10
    spike_prob: float = 0.08
    spike_size: float = 5.0
    path1_base_cost: float = 0.4
    path2_cost: float = 0.9
    path1_bonus: float = 0.0
    # hazard_grid
    grid_size: int = 7
    hazards: Optional[list] = None
    hazard_base_cost: float = 0.5
    hazard_spike: float = 0.5
    hazard_spike_prob: float = 0.5
    respawn: bool = True
    time_feature: bool = True  # append steps-left / max_steps to the grid one-hot
    # shared
    distance_scale: float = 1.0
    goal_bonus: float = 1.0

    def __post_init__(self):
        if self.env_id not in ("two_path", "hazard_grid"):
            raise ValueError(f"unknown env_id {self.env_id!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


class _Env:
    """Shared bookkeeping: seeding, step counting, termination checks."""

    discrete = True

    def __init__(self, config: EnvConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.t = 0
        self.done = True
        self._obs = None

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self._reset_state()
        self._obs = self.observe()
        return self._obs

    def step(self, action) -> Transition:
        if self.done:
            raise EpisodeFinished("step() called on a finished episode; call reset() first")
        s = self._obs
        reward, cost, terminal = self._advance(action)
        self.t += 1
        truncated = (not terminal) and self.t >= self.config.max_steps
        self.done = terminal or truncated
        self._obs = self.observe()
        return Transition(s, action, reward, cost, self._obs, terminal, truncated)

    def clone(self) -> "_Env":
        return copy.deepcopy(self)

    # subclass hooks
    def _reset_state(self) -> None:
        raise NotImplementedError

    def _advance(self, action) -> tuple[float, float, bool]:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError


class TwoPathEnv(_Env):
    """Start state, a one-shot choice between two paths, then ``path_length`` steps.

    Path 1 charges ``0.4 + 5 * Bernoulli(0.08)`` per step; path 2 charges a flat
    0.9.  Index 0 of the observation is the start state, then path-1 cells,
    then path-2 cells, then the goal.
    """

    n_actions = 2
    PATH1, PATH2 = 0, 1

    def __init__(self, config: EnvConfig):
        super().__init__(config)
        self.length = config.path_length
        self.obs_dim = 2 * self.length + 2
        self.path = None
        self.pos = 0

    def _reset_state(self) -> None:
        self.path = None
        self.pos = 0

    def _index(self) -> int:
        if self.path is None:
            return 0
        if self.pos > self.length:
            return self.obs_dim - 1
        return 1 + self.path * self.length + (self.pos - 1)

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self._index()] = 1.0
        return obs

    def distance(self) -> int:
        """Steps left to the goal."""
        return self.length + 1 - self.pos

    def _advance(self, action):
        cfg = self.config
        before = self.distance()
        cost = 0.0
        if self.path is None:
            self.path = int(action)
            if self.path not in (self.PATH1, self.PATH2):
                raise ValueError(f"invalid two_path action {action!r}")
        elif self.path == self.PATH1:
            spike = self.rng.random() < cfg.spike_prob
            cost = cfg.path1_base_cost + cfg.spike_size * spike
        else:
            cost = cfg.path2_cost
        self.pos += 1
        reached = self.pos > self.length
        reward = cfg.distance_scale * (before - self.distance())
        if reached:
            reward += cfg.goal_bonus + (cfg.path1_bonus if self.path == self.PATH1 else 0.0)
        return reward, cost, reached

    def state_key(self):
        return (self.path, self.pos)


def default_hazards(n: int) -> list[tuple[int, int]]:
    """Four cells sealing off the 2x2 start corner, plus two next to the goal."""
    return [(2, 0), (2, 1), (0, 2), (1, 2), (n - 3, n - 2), (n - 2, n - 3)]


class HazardGridEnv(_Env):
    """``n x n`` grid, 4-connected moves, start (0, 0), goal (n-1, n-1).

    Entering a hazard cell costs ``0.5 + 0.5 * Bernoulli(0.5)``.  Reward is the
    decrease in Euclidean distance to the goal (times ``distance_scale``) plus a
    goal bonus; with ``respawn`` the agent is put back on the start cell after
    reaching the goal and the episode runs until ``max_steps``.
    """

    n_actions = 4
    MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0))  # up, down, left, right

    def __init__(self, config: EnvConfig):
        super().__init__(config)
        self.n = config.grid_size
        hazards = config.hazards if config.hazards is not None else default_hazards(self.n)
        self.hazards = {tuple(int(v) for v in h) for h in hazards}
        self.goal = (self.n - 1, self.n - 1)
        self.start = (0, 0)
        self.obs_dim = self.n * self.n + int(config.time_feature)
        self.pos = self.start
        if self.goal in self.hazards or self.start in self.hazards:
            raise ValueError("start and goal cells cannot be hazards")

    def _reset_state(self) -> None:
        self.pos = self.start

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self.pos[1] * self.n + self.pos[0]] = 1.0
        if self.config.time_feature:
            # with respawn the cost-to-go depends on how many steps are left
            obs[-1] = (self.config.max_steps - self.t) / self.config.max_steps
        return obs

    def distance(self, pos=None) -> float:
        x, y = self.pos if pos is None else pos
        return math.hypot(self.goal[0] - x, self.goal[1] - y)

    def _advance(self, action):
        cfg = self.config
        dx, dy = self.MOVES[int(action)]
        x = min(max(self.pos[0] + dx, 0), self.n - 1)
        y = min(max(self.pos[1] + dy, 0), self.n - 1)
        new = (x, y)
        cost = 0.0
        if new in self.hazards and new != self.pos:
            cost = cfg.hazard_base_cost + cfg.hazard_spike * (self.rng.random() < cfg.hazard_spike_prob)
        reward = cfg.distance_scale * (self.distance() - self.distance(new))
        reached = new == self.goal
        if reached:
            reward += cfg.goal_bonus
        if reached and cfg.respawn:
            self.pos = self.start
            return reward, cost, False
        self.pos = new
        return reward, cost, reached

    def state_key(self):
        return self.pos


def make_env(config: EnvConfig) -> _Env:
    if config.env_id == "two_path":
        return TwoPathEnv(config)
    return HazardGridEnv(config)


def reset(env: _Env, seed: int) -> np.ndarray:
    return env.reset(seed)


def step(env: _Env, action) -> Transition:
    return env.step(action)


# -- rollouts -----------------------------------------------------------------


@dataclass
class TrajectoryBatch:
    """Flat arrays of ``n`` consecutive transitions, possibly spanning episodes."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray  # terminal, no bootstrap
    truncated: np.ndarray
    logp: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    episode_costs: list[float] = field(default_factory=list)  # discounted
    episode_costs_undiscounted: list[float] = field(default_factory=list)
    episode_first_actions: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_end(self) -> np.ndarray:
        return self.dones | self.truncated


class Collector:
    """Steps one environment with a policy, carrying unfinished episodes across batches."""

    def __init__(self, env: _Env, gamma: float, seed: int):
        self.env = env
        self.gamma = gamma
        self.rng = np.random.default_rng(seed)
        self.obs = env.reset(int(self.rng.integers(2**63)))
        # per-episode terms, summed with fsum so flat costs add up exactly
        self._ep_rewards: list[float] = []
        self._ep_costs: list[float] = []
        self._ep_dcosts: list[float] = []
        self._ep_t = 0
        self._first_action = None

    def collect(self, act: Callable, n_steps: int) -> TrajectoryBatch:
        if n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {n_steps}")
        env = self.env
        dim = env.obs_dim
        obs = np.empty((n_steps, dim))
        next_obs = np.empty((n_steps, dim))
        actions = np.empty(n_steps, dtype=int if env.discrete else object)
        rewards, costs, logp = np.empty(n_steps), np.empty(n_steps), np.empty(n_steps)
        dones = np.zeros(n_steps, dtype=bool)
        truncs = np.zeros(n_steps, dtype=bool)
        batch = TrajectoryBatch(obs, actions, rewards, costs, next_obs, dones, truncs, logp)
        for i in range(n_steps):
            a, lp = act(self.obs, self.rng)
            tr = env.step(a)
            obs[i], actions[i], rewards[i], costs[i] = tr.state, a, tr.reward, tr.cost
            next_obs[i], dones[i], truncs[i], logp[i] = tr.next_state, tr.done, tr.truncated, lp
            if self._ep_t == 0:
                self._first_action = a
            self._ep_rewards.append(tr.reward)
            self._ep_costs.append(tr.cost)
            self._ep_dcosts.append(self.gamma**self._ep_t * tr.cost)
            self._ep_t += 1
            if tr.done or tr.truncated:
                batch.episode_returns.append(math.fsum(self._ep_rewards))
                batch.episode_costs.append(math.fsum(self._ep_dcosts))
                batch.episode_costs_undiscounted.append(math.fsum(self._ep_costs))
                batch.episode_first_actions.append(self._first_action)
                self._ep_rewards, self._ep_costs, self._ep_dcosts = [], [], []
                self._ep_t = 0
                self.obs = env.reset(int(self.rng.integers(2**63)))
            else:
                self.obs = tr.next_state
        return batch


def collect_batch(policy, env: _Env, n_steps: int, rng_seed: int = 0, gamma: float = 0.99,
                  flat=None) -> TrajectoryBatch:
    """Collect exactly ``n_steps`` transitions, starting from a fresh episode."""
    collector = Collector(env, gamma, rng_seed)
    return collector.collect(_actor(policy, flat), n_steps)


def _actor(policy, flat=None) -> Callable:
    if hasattr(policy, "sample"):
        return lambda obs, rng: policy.sample(obs, rng, flat)
    return policy  # already a callable (obs, rng) -> (action, logp)


def rollout_episode(act: Callable, env: _Env, seed: int, gamma: float = 0.99) -> Trajectory:
    rng = np.random.default_rng(seed)
    obs = env.reset(int(rng.integers(2**63)))
    transitions = []
    while True:
        a, _ = act(obs, rng)
        tr = env.step(a)
        transitions.append(tr)
        if tr.done or tr.truncated:
            return Trajectory(transitions, gamma)
        obs = tr.next_state
