"""Stationary Fleming-Viot particle systems pick the minimal QSD as N grows.

Run with ``python demos/02_selection_principle.py`` (about a minute).
"""
# %%
import numpy as np

from qsdfv.gw_model import beta, binary_law
from qsdfv.stats import stationary_sweep

law = binary_law(0.75)
nu = (2 / 3) * (1 / 3) ** np.arange(200)

# 16 independent runs per N; run r uses the same seed at every N
sw = stationary_sweep(law, [25, 100, 400, 800], horizon=500.0, burn_in=50.0, runs=16,
                      seed=1, rho=beta(law) / 4, reference=nu)

print(" N    TV(m_bar,nu*)   m(1)-nu*(1)     psi_bar          exp(rho R)/N")
for r in sw.rows:
    print(f"{r.N:4d}  {r.tv:.5f}+-{r.tv_se:.5f}  {r.m1 - nu[0]:+.5f}  "
          f"{r.psi:.4f}+-{r.psi_hw:.4f}  {r.exp_moment_over_N:.5f}")

# %% psi_bar settles near E[x^2] / E[x] = 2 under nu*, approaching it from below
x = np.arange(1, 201)
print("\nE x^2 / E x under nu* =", np.dot(x * x, nu) / np.dot(x, nu))
