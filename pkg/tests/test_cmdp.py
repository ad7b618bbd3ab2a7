import math

import numpy as np
import pytest

from qcpo.cmdp import (
    Collector, EnvConfig, EpisodeFinished, HazardGridEnv, Trajectory, Transition, TwoPathEnv,
    collect_batch, episode_cost_sum, make_env, reset, rollout_episode, step,
)
from qcpo.oracle import constant_policy, mc_outage, rollout_costs, uniform_policy

# scipy.stats.binom(10, 0.08): P(at least two spikes)
P_TWO_SPIKES = 0.18788245514712265


def always(a):
    return lambda obs, rng: (a, 0.0)


def test_two_path_reset_is_start():
    env = make_env(EnvConfig("two_path"))
    for seed in (0, 123, 2**64 - 1):
        obs = reset(env, seed)
        assert obs[0] == 1.0 and obs.sum() == 1.0
        assert env.path is None and env.pos == 0


def test_hazard_reset_corner():
    env = make_env(EnvConfig("hazard_grid", grid_size=5))
    reset(env, 9)
    assert env.pos == (0, 0) and env.goal == (4, 4)


def test_same_seed_same_first_cost():
    draws = []
    for _ in range(2):
        env = make_env(EnvConfig("two_path"))
        reset(env, 77)
        step(env, TwoPathEnv.PATH1)
        draws.append([step(env, 0).cost for _ in range(10)])
    assert draws[0] == draws[1]


def test_path2_costs():
    env = make_env(EnvConfig("two_path"))
    reset(env, 0)
    first = step(env, TwoPathEnv.PATH2)
    assert first.cost == 0.0
    costs = []
    tr = first
    while not tr.done:
        tr = step(env, 0)
        costs.append(tr.cost)
    assert costs == [0.9] * 10
    assert sum(costs) == pytest.approx(9.0, abs=1e-12)


def test_path1_cost_values():
    env = make_env(EnvConfig("two_path"))
    reset(env, 5)
    step(env, TwoPathEnv.PATH1)
    costs = [step(env, 0).cost for _ in range(10)]
    assert set(costs) <= {0.4, 5.4}
    assert env.done


def test_step_after_done_raises():
    env = make_env(EnvConfig("two_path"))
    reset(env, 0)
    for _ in range(11):
        step(env, 1)
    with pytest.raises(EpisodeFinished):
        step(env, 1)


def test_step_before_reset_raises():
    with pytest.raises(EpisodeFinished):
        make_env(EnvConfig("hazard_grid")).step(0)


def test_invalid_path_action():
    env = make_env(EnvConfig("two_path"))
    reset(env, 0)
    with pytest.raises(ValueError):
        step(env, 2)


def test_negative_cost_rejected():
    with pytest.raises(ValueError):
        Transition(np.zeros(1), 0, 0.0, -0.1, np.zeros(1), False)


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig("cartpole")
    with pytest.raises(ValueError):
        EnvConfig(max_steps=0)
    with pytest.raises(ValueError):
        EnvConfig(seed=-1)


def test_hazard_reward_shaping_approach():
    # (4, 6) is distance 2 from the goal (6, 6); moving right lands on (5, 6), distance 1
    env = HazardGridEnv(EnvConfig("hazard_grid"))
    reset(env, 0)
    env.pos = (4, 6)
    env._obs = env.observe()
    tr = step(env, 3)
    assert tr.reward == pytest.approx(1.0)
    assert tr.cost == 0.0


def test_hazard_distance_scale():
    env = HazardGridEnv(EnvConfig("hazard_grid", distance_scale=2.5))
    reset(env, 0)
    env.pos = (4, 6)
    env._obs = env.observe()
    assert step(env, 3).reward == pytest.approx(2.5)


def test_hazard_entry_cost_and_wall():
    env = HazardGridEnv(EnvConfig("hazard_grid"))
    reset(env, 0)
    env.pos = (1, 0)
    env._obs = env.observe()
    tr = step(env, 3)  # into (2, 0)
    assert tr.cost in (0.5, 1.0)
    env.pos = (0, 0)
    env._obs = env.observe()
    tr = step(env, 1)  # bump into the bottom wall
    assert tr.cost == 0.0 and tr.reward == 0.0 and env.pos == (0, 0)


def test_hazard_goal_respawns_and_truncates():
    env = HazardGridEnv(EnvConfig("hazard_grid", max_steps=3))
    reset(env, 0)
    env.pos = (5, 6)
    env._obs = env.observe()
    tr = step(env, 3)
    assert tr.reward == pytest.approx(1.0 + 1.0)
    assert env.pos == (0, 0) and not tr.done
    step(env, 0)
    tr = step(env, 0)
    assert tr.truncated and not tr.done and env.done


def test_hazard_time_feature():
    env = HazardGridEnv(EnvConfig("hazard_grid", max_steps=4))
    obs = reset(env, 0)
    assert obs.shape == (50,) and obs[-1] == 1.0
    step(env, 0)
    tr = step(env, 0)
    assert tr.next_state[-1] == 0.5 and tr.next_state[:49].sum() == 1.0
    plain = make_env(EnvConfig("hazard_grid", time_feature=False))
    assert plain.obs_dim == 49 and reset(plain, 0).sum() == 1.0


def test_hazard_goal_terminal_without_respawn():
    env = HazardGridEnv(EnvConfig("hazard_grid", respawn=False))
    reset(env, 0)
    env.pos = (6, 5)
    env._obs = env.observe()
    tr = step(env, 0)
    assert tr.done and not tr.truncated


def test_dynamics_deterministic_from_clone():
    env = make_env(EnvConfig("hazard_grid"))
    reset(env, 3)
    rng = np.random.default_rng(0)
    for a in rng.integers(4, size=15):
        step(env, int(a))
    for a in range(4):
        c1, c2 = env.clone(), env.clone()
        t1, t2 = step(c1, a), step(c2, a)
        np.testing.assert_array_equal(t1.next_state, t2.next_state)
        assert t1.cost == t2.cost


def test_identical_action_stream_identical_transitions():
    actions = np.random.default_rng(4).integers(4, size=100)
    runs = []
    for _ in range(2):
        env = make_env(EnvConfig("hazard_grid", seed=42))
        env.reset()
        runs.append([(tuple(t.next_state), t.reward, t.cost, t.done) for t in (step(env, int(a)) for a in actions)])
    assert runs[0] == runs[1]


def test_collect_path2_22_steps():
    env = make_env(EnvConfig("two_path"))
    batch = collect_batch(always(TwoPathEnv.PATH2), env, 22)
    assert len(batch) == 22
    assert batch.dones.sum() == 2
    assert batch.episode_costs_undiscounted == pytest.approx([9.0, 9.0], abs=1e-12)


def test_collect_zero_steps_raises():
    with pytest.raises(ValueError):
        collect_batch(always(0), make_env(EnvConfig("two_path")), 0)


def test_collector_carries_partial_episode():
    c = Collector(make_env(EnvConfig("two_path")), 0.99, 0)
    b1 = c.collect(always(1), 5)
    b2 = c.collect(always(1), 17)
    assert b1.episode_costs == [] and len(b2.episode_costs_undiscounted) == 2
    assert b2.episode_costs_undiscounted[0] == pytest.approx(9.0)


def test_collector_discounted_episode_cost():
    c = Collector(make_env(EnvConfig("two_path")), 0.99, 0)
    b = c.collect(always(1), 11)
    assert b.episode_costs[0] == pytest.approx(sum(0.9 * 0.99**t for t in range(1, 11)))


def test_uniform_policy_path_split():
    n = 10_000
    c = Collector(make_env(EnvConfig("two_path")), 0.99, 1)
    b = c.collect(lambda obs, rng: (int(rng.integers(2)), math.log(0.5)), 11 * n)
    firsts = np.array(b.episode_first_actions)
    assert firsts.size == n
    p1 = np.mean(firsts == TwoPathEnv.PATH1)
    assert abs(p1 - 0.5) <= 3 * math.sqrt(0.25 / n)


@pytest.mark.parametrize("costs, gamma, expected", [
    ([1, 1, 1], 1.0, 3.0),
    ([0, 0, 0, 0], 0.9, 0.0),
    ([2, 2], 0.5, 3.0),
])
def test_episode_cost_sum(costs, gamma, expected):
    assert episode_cost_sum(costs, gamma) == expected


def test_episode_cost_sum_errors():
    with pytest.raises(ValueError):
        episode_cost_sum([], 1.0)
    with pytest.raises(ValueError):
        episode_cost_sum([1.0], 0.0)


def test_trajectory_sum_is_exact():
    env = make_env(EnvConfig("two_path"))
    traj = rollout_episode(always(0), env, seed=3, gamma=0.97)
    assert isinstance(traj, Trajectory) and len(traj) == 11
    expected = sum(0.97**t * tr.cost for t, tr in enumerate(traj.transitions))
    assert traj.discounted_cost_sum == pytest.approx(expected, rel=1e-15)
    assert traj.undiscounted_return == pytest.approx(12.0)


def test_two_path_separation():
    n = 100_000
    cfg = EnvConfig("two_path")
    c1 = rollout_costs(constant_policy(0), cfg, n, gamma=1.0, seed=10)
    c2 = rollout_costs(constant_policy(1), cfg, n, gamma=1.0, seed=11)
    # E[cost | path1] = 10 * (0.4 + 5 * 0.08); Var = 10 * 25 * 0.08 * 0.92
    assert abs(c1.mean() - 8.0) < 3 * math.sqrt(10 * 25 * 0.08 * 0.92 / n)
    np.testing.assert_allclose(c2, 9.0, atol=1e-12)
    out1 = np.mean(c1 > 10)
    assert abs(out1 - P_TWO_SPIKES) < 3 * math.sqrt(P_TWO_SPIKES * (1 - P_TWO_SPIKES) / n)
    assert np.mean(c2 > 10) == 0.0


def test_costs_nonnegative_under_random_play():
    for env_id in ("two_path", "hazard_grid"):
        costs = rollout_costs(uniform_policy(2 if env_id == "two_path" else 4), EnvConfig(env_id), 500, seed=2)
        assert np.all(costs >= 0)


def test_hazard_outage_is_probability():
    p = mc_outage(uniform_policy(4), EnvConfig("hazard_grid"), 3.0, n_rollouts=200, seed=0)
    assert 0.0 <= p <= 1.0
