"""The branching process that dominates the particle system, pathwise.

Run with ``python demos/03_branching_coupling.py``.
"""
# %% One coupled trajectory with every event checked
import math

import numpy as np

from qsdfv.branching import (MultitypeState, fit_large_deviation, simulate_branching,
                             simulate_coupled, simulate_reflected_gw)
from qsdfv.gw_model import binary_law, exp_moment_bound
from qsdfv.seeding import derive_seed

law = binary_law(0.75)
run = simulate_coupled(law, np.ones(8, dtype=np.int64), 2.0, seed=3, strict=True)
print(f"{run.events} events, {run.checks} invariant checks, violations: {run.violations}")
print("particles:", run.xi.tolist(), " R(xi) =", run.xi.max(),
      " R(zeta) =", run.zeta.rightmost, " |zeta| =", run.zeta.size)

# %% Mean population grows like exp(q_bar t)
z0 = MultitypeState.from_particles(np.ones(10, dtype=np.int64))
sizes = np.array([simulate_branching(law, z0, 1.0, derive_seed(1, r)).sizes[0]
                  for r in range(3000)])
print(f"\nE|zeta_1| ~ {sizes.mean():.2f} +- {sizes.std() / math.sqrt(sizes.size):.2f}"
      f"  (10 e^0.75 = {10 * math.exp(0.75):.2f})")

# %% Reflected process: exponential moment and deviations above the mean path
smp = simulate_reflected_gw(law, 5, 2.0, seed=2, n_replicas=100_000)
est, se = smp.exp_moment(0.2)
print(f"\nE exp(0.2 Z~_2) from 5: {est:.4f} +- {se:.4f}, bound {exp_moment_bound(law, 0.2, 5, 2.0):.4f}")
ld = simulate_reflected_gw(law, 40, 1.0, seed=3, n_replicas=100_000)
fit = fit_large_deviation(ld, [5, 10, 15, 20])
for d, f, b in zip(fit.deltas, fit.frequencies, fit.bounds):
    print(f"  P(sup excess >= {d:4.0f}) = {f:.2e}   fitted bound {b:.2e}")
print(f"  fitted kappa = {fit.kappa:.3f}")
