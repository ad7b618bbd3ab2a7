import dataclasses

import numpy as np
import pytest

from qcpo.autodiff import GradTape
from qcpo.cmdp import EnvConfig
from qcpo.trainer import (
    METRIC_COLUMNS, Agent, Trainer, TrainerConfig, discounted_to_go, ppo_policy_loss, run, subtrajectories,
)

SMALL = dict(batch_steps=400, subtraj_len=50, epochs_per_batch=2, hidden=(16, 16), lr=1e-3)


def small(**kw):
    return TrainerConfig(**{**SMALL, **kw})


def test_config_validation():
    for kw in ({"r_clip": 0}, {"eps0": 1.0}, {"gamma": 1.0}, {"mode": "cvar"}, {"tail_k": 1},
               {"policy_warmup_iters": -1}, {"batch_steps": 0}, {"mu_denominator": "both"}):
        with pytest.raises(ValueError):
            TrainerConfig(**kw)


def test_defaults():
    c = TrainerConfig()
    assert (c.gamma, c.lr, c.n_q, c.tail_k, c.r_clip, c.c_clip, c.eta) == (0.99, 1e-4, 25, 8, 0.1, 0.5, 0.1)
    assert (c.batch_steps, c.subtraj_len, c.epochs_per_batch, c.hidden) == (4000, 100, 8, (64, 64))
    assert c.entropy_coef == 0.0 and c.lam_init == 0.0


def test_ppo_loss_ratio_one():
    a = np.array([0.5, -1.0, 2.0])
    lp = np.log([0.3, 0.6, 0.2])
    with GradTape() as tape:
        w = tape.watch(lp)
        loss = ppo_policy_loss(w, lp, a, 0.1)
    assert float(loss.value) == pytest.approx(-a.mean())
    # vanilla policy gradient: d/dlogp of -mean(ratio * A) at ratio 1
    np.testing.assert_allclose(tape.gradient(loss, w), -a / 3)


# the min always picks the pessimistic side of the clip
@pytest.mark.parametrize("ratio, a, expected", [(1.3, 2.0, 1.1 * 2.0), (0.8, -2.0, 0.9 * -2.0),
                                                (0.8, 2.0, 0.8 * 2.0), (1.3, -2.0, 1.3 * -2.0)])
def test_ppo_loss_clip_cases(ratio, a, expected):
    loss = ppo_policy_loss(np.array([np.log(ratio)]), np.array([0.0]), np.array([a]), 0.1)
    assert float(loss.value) == pytest.approx(-expected)


def test_ppo_loss_rejects_nonfinite():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        ppo_policy_loss(np.array([1000.0]), np.array([0.0]), np.array([1.0]), 0.1)


def test_discounted_to_go():
    r = np.array([1.0, 1.0, 1.0, 2.0, 2.0])
    ends = np.array([False, False, True, False, False])
    out = discounted_to_go(r, ends, np.array([10.0]), 0.5)
    np.testing.assert_allclose(out, [1.75, 1.5, 1.0, 2 + 0.5 * (2 + 5), 2 + 5])


def test_subtrajectories():
    blocks = subtrajectories(4000, 100)
    assert len(blocks) == 40 and all(len(b) == 100 for b in blocks)
    np.testing.assert_array_equal(np.concatenate(blocks), np.arange(4000))
    assert [len(b) for b in subtrajectories(250, 100)] == [100, 100, 50]


def test_iteration_is_reproducible():
    rows = []
    for _ in range(2):
        tr = Trainer(small(seed=3), EnvConfig("two_path"))
        rows.append([tr.train_iteration().row() for _ in range(2)])
    assert rows[0] == rows[1]


def test_seed_changes_history():
    a = Trainer(small(seed=1), EnvConfig("two_path")).train_iteration().row()
    b = Trainer(small(seed=2), EnvConfig("two_path")).train_iteration().row()
    assert a != b


def test_zero_budget_gives_empty_history():
    assert run(small(max_env_steps=0), EnvConfig("two_path")) == []


def test_run_respects_budget_and_sink():
    seen = []
    hist = run(small(max_env_steps=1000), EnvConfig("two_path"), sink=seen.append)
    assert len(hist) == 2 and seen == hist
    assert hist[-1].env_steps == 800


@pytest.mark.parametrize("mode", ["qcpo", "expcp"])
def test_zero_lambda_matches_unconstrained(mode):
    env = EnvConfig("hazard_grid")
    ref = Trainer(small(mode="ppo", seed=4), env)
    con = Trainer(small(mode=mode, seed=4, freeze_lambda=True), env)
    for _ in range(2):
        m_ref, m_con = ref.train_iteration(), con.train_iteration()
        assert m_con.lam == 0.0
        assert m_ref.policy_loss == m_con.policy_loss
    for g in ("pi", "v", "q", "tail"):
        assert ref.agent.stores[g].values.tobytes() == con.agent.stores[g].values.tobytes()


def test_zero_lambda_advantages_identical():
    tr = Trainer(small(seed=0), EnvConfig("hazard_grid"))
    tr.train_iteration()
    b = tr.collector.collect(tr.agent.act, 300)
    ref = dataclasses.replace(tr.config, mode="ppo")
    a_q = tr.advantages(b, 0.0)["combined"]
    tr.config = ref
    a_p = tr.advantages(b, 0.0)["combined"]
    assert a_q.tobytes() == a_p.tobytes()


def test_warmup_skips_policy():
    tr = Trainer(small(policy_warmup_iters=2), EnvConfig("two_path"))
    pi0 = tr.agent.stores["pi"].values.copy()
    m = tr.train_iteration()
    assert m.policy_loss == 0.0 and np.array_equal(pi0, tr.agent.stores["pi"].values)
    tr.train_iteration()
    tr.train_iteration()
    assert not np.array_equal(pi0, tr.agent.stores["pi"].values)


def test_metrics_schema_and_ranges():
    tr = Trainer(small(), EnvConfig("hazard_grid"))
    for _ in range(2):
        m = tr.train_iteration()
        row = m.row()
        assert len(row) == len(METRIC_COLUMNS)
        assert all(np.isfinite(row))
        assert 0.0 <= m.outage_prob_100ep <= 1.0
        assert 0.0 <= m.quantile_crossing_rate <= 1.0


def test_mu_variant_gap_is_symmetric_in_the_denominator():
    gaps = [Trainer(small(mu_denominator=d), EnvConfig("hazard_grid")).train_iteration().mu_variant_gap
            for d in ("next", "current")]
    assert gaps[0] == gaps[1] and gaps[0] >= 0.0
    assert np.isnan(Trainer(small(mode="ppo"), EnvConfig("hazard_grid")).train_iteration().mu_variant_gap)


def test_additional_cost_diagnostic_is_finite():
    m = Trainer(small(), EnvConfig("hazard_grid")).train_iteration()
    assert np.isfinite(m.c_tilde_mean)


def test_lambda_warms_up_then_moves():
    tr = Trainer(small(d_th=0.0, window=20, batch_steps=200), EnvConfig("two_path"))
    lams = [tr.train_iteration().lam for _ in range(3)]
    assert lams[0] == 0.0
    assert tr.lagrange.lam > 0


def test_kl_small_at_default_learning_rate():
    cfg = TrainerConfig(batch_steps=2000, hidden=(64, 64), seed=0)
    for env_id in ("two_path", "hazard_grid"):
        tr = Trainer(cfg, EnvConfig(env_id))
        kls = [tr.train_iteration().mean_kl_old_new for _ in range(3)]
        assert np.mean(kls) < 0.1


def test_checkpoint_round_trip(tmp_path):
    tr = Trainer(small(seed=9), EnvConfig("two_path"))
    tr.train_iteration()
    path = tmp_path / "ck.npz"
    tr.agent.save(str(path), extra={"note": "x"})
    loaded = Agent.load(str(path))
    for g in Agent.GROUPS:
        np.testing.assert_array_equal(loaded.stores[g].values, tr.agent.stores[g].values)
    assert loaded.extra == {"note": "x"}
    assert loaded.config.hidden == (16, 16)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, header='{"format": "other", "version": 1}', params=np.zeros(1), layout="[]")
    with pytest.raises(ValueError):
        Agent.load(str(path))
