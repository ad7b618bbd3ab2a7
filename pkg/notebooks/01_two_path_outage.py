"""
Two paths, one budget
=====================

Both paths reach the goal with the same reward.  Path 1 is cheap on average
but occasionally spikes; path 2 costs a flat 0.9 per step.  An expected-cost
constraint prefers path 1.  A constraint on the 0.9-quantile of the episode
cost sees the spikes and moves to path 2.
"""

import numpy as np

from qcpo import EnvConfig, Trainer, TrainerConfig
from qcpo.oracle import constant_policy, mc_outage, mc_quantile

env = EnvConfig("two_path")

# what each path costs, from brute-force rollouts
for a, name in ((0, "path 1"), (1, "path 2")):
    q90 = mc_quantile(constant_policy(a), env, 0.9, 20_000, gamma=1.0)
    out = mc_outage(constant_policy(a), env, 10.0, 20_000, gamma=1.0)
    print(f"{name}: 0.9-quantile {q90:.1f}, P(cost > 10) = {out:.3f}")

# short desk-scale runs; the acceptance test uses more iterations and seeds
common = dict(lr=3e-3, batch_steps=2000, minibatches=4, lam_init=1.0, policy_warmup_iters=10,
              discounted_constraint=False, seed=1)
runs = {
    "qcpo": TrainerConfig(mode="qcpo", d_th=10.0, eps0=0.1, **common),
    "expcp": TrainerConfig(mode="expcp", d_th=8.5, **common),
}
for name, cfg in runs.items():
    tr = Trainer(cfg, env)
    start = tr.env.reset(0)
    for i in range(60):
        m = tr.train_iteration()
    p2 = np.exp(tr.agent.policy.log_probs_np(start[None]))[0, 1]
    print(f"{name}: P(path 2) {p2:.3f}, outage {m.outage_prob_100ep:.2f}, "
          f"avg cost {m.avg_cost_sum_100ep:.2f}, lambda {m.lam:.2f}")
