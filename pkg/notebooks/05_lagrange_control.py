"""
Integral control of the multiplier
==================================

The multiplier grows while the windowed (1 - eps0)-quantile of episode cost is
above the threshold, and is projected back to zero from below.
"""

import numpy as np

from qcpo.lagrange import LagrangeState, update

rng = np.random.default_rng(0)
state = LagrangeState(lam=0.0, eta=0.1, d_th=10.0, eps0=0.1, window=100)

# a stand-in policy whose cost falls as the multiplier rises
for it in range(30):
    costs = rng.normal(12.0 - 2.0 * state.lam, 1.0, size=20)
    state.record(costs)
    state = update(state)
    if it % 5 == 4:
        print(f"iter {it + 1}: quantile {state.last_estimate:.2f}, lambda {state.lam:.3f}")
