"""
Outage control on the hazard grid
=================================

Every trip to the goal crosses a hazard, so return and cost rise together.
The multiplier has to find the trip rate at which P(cost > d_th) sits at the
target.  In the trace below the policy commits to rushing early; the
multiplier then climbs for dozens of iterations before the outage gives way.
"""

from qcpo import EnvConfig, Trainer, TrainerConfig

cfg = TrainerConfig(mode="qcpo", d_th=3.5, eps0=0.2, lr=3e-3, batch_steps=2000, minibatches=4,
                    entropy_coef=0.01, seed=0)
tr = Trainer(cfg, EnvConfig("hazard_grid"))

print("iter  lambda  outage  quantile  return")
for i in range(80):
    m = tr.train_iteration()
    if i % 5 == 4:
        print(f"{i + 1:4d}  {m.lam:6.2f}  {m.outage_prob_100ep:6.2f}  {m.empirical_quantile:8.2f}  {m.avg_return_100ep:6.1f}")
