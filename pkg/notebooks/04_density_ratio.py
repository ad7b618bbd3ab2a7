"""
The density-ratio weight
========================

On a small tabular chain the exact cost distributions are known, so the
weighted TD identity can be checked directly.  A flipped sign in the shifted
argument breaks it, and the check notices.
"""

from qcpo.advantage import smooth_mu
from qcpo.oracle import bernoulli_chain, flipped_shift, td_identity_check

chain = bernoulli_chain()
for u in (0.5, 0.9):
    r = td_identity_check(chain, "s0", u, n_mc=200_000, seed=1)
    print(f"u={u}: lhs {r.lhs:.4f} rhs {r.rhs:.4f} z {r.z_score:+.2f}, "
          f"E[mu] {r.mu_mean:.4f} (z {r.mu_z_score:+.2f}) -> {r.status}")

bad = td_identity_check(chain, "s0", 0.9, n_mc=200_000, seed=3, shift=flipped_shift)
print("flipped shift:", bad.status, f"z {bad.z_score:+.1f}")

# training uses a clipped log weight instead of the raw ratio
for mu in (0.2, 0.9, 1.0, 1.3, 5.0):
    print(f"mu={mu}: smoothed {smooth_mu(mu):.3f}")
