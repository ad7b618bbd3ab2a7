"""
Quantiles and outage probabilities
==================================

Bounding the u-quantile of the episode cost by d is the same as bounding the
probability of exceeding d by 1 - u.  The check below estimates the quantile
from one stream of rollouts and the outage from another.
"""

from qcpo import EnvConfig
from qcpo.oracle import duality_check, uniform_policy

rows = duality_check(uniform_policy(4), EnvConfig("hazard_grid"), us=(0.5, 0.8, 0.9), seed=6)
for r in rows:
    print(f"u={r['u']}: quantile {r['quantile']:.3f}, outage {r['outage']:.4f} "
          f"vs {1 - r['u']:.2f} +/- {r['band']:.4f}  {'ok' if r['passed'] else 'MISS'}")
