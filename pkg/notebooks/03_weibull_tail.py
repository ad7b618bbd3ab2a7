"""
Fitting a Weibull tail to the top quantiles
===========================================

Only the upper quantile estimates are used.  Under a Weibull law
``log(-log(1-u))`` is linear in ``log q``, so the fit is well conditioned.
"""

import numpy as np

from qcpo.critic import quantile_fractions
from qcpo.tail import WeibullParams, fit_weibull, weibull_quantile, weibull_survival

u = quantile_fractions(25)[-8:]
truth = WeibullParams(1.5, 2.0)

p, loss = fit_weibull(u, weibull_quantile(u, truth))
print(f"noiseless: alpha {p.alpha:.3f}, beta {p.beta:.3f}, loss {loss:.2e}")

x = truth.beta * np.random.default_rng(0).weibull(truth.alpha, size=10_000)
p, _ = fit_weibull(u, np.quantile(x, u))
print(f"from 10^4 samples: alpha {p.alpha:.3f}, beta {p.beta:.3f}")

# smaller alpha, heavier tail
for a in (0.5, 1.0, 2.0):
    print(f"alpha={a}: P(X > 3 beta) = {weibull_survival(6.0, WeibullParams(a, 2.0)):.2e}")
