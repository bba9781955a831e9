"""Minimal quasi-stationary distribution of a subcritical Galton-Watson process.

Run with ``python demos/01_minimal_qsd.py``.  Everything here is exact
numerics on a truncated state space; no randomness is involved.
"""
# %% The driving process and its constants
import numpy as np

from qsdfv.exact import (DistributionVector, TruncatedSubGenerator, conditioned_flow, eigen_qsd,
                         gf_minimal_qsd, gf_of, stress_set_k_alpha, yaglom_qsd)
from qsdfv.gw_model import binary_law, geometric_truncated_law, law_summary

law = binary_law(0.75)
print("binary law:", law_summary(law))

# %% Three routes to the minimal QSD
gen = TruncatedSubGenerator.build(law, 200)
y = yaglom_qsd(gen)
e = eigen_qsd(gen)
geo = (2 / 3) * (1 / 3) ** np.arange(200)
print(f"Yaglom iteration: {y.iterations} steps, extinction rate {y.theta:.10f}")
print("max |yaglom - geometric| =", np.abs(y.dist.mass - geo).max())
print("max |eigen  - geometric| =", np.abs(e.dist.mass - geo).max())

z = np.linspace(0.1, 0.9, 9)
print("generating function, closed form vs Yaglom:")
for zi, a, b in zip(z, gf_minimal_qsd(law, z), gf_of(y.dist, z)):
    print(f"  z={zi:.1f}  {a:.12f}  {b:.12f}")

# %% The same for a law without a closed form
other = geometric_truncated_law(0.4, 6)
g2 = TruncatedSubGenerator.build(other, 200)
nu2 = eigen_qsd(g2).dist
print("\ngeometric-truncated law, first atoms:", np.round(nu2.mass[:5], 6))
print("closed-form check:", np.abs(gf_of(nu2, z) - gf_minimal_qsd(other, z)).max())

# %% Convergence from every start with bounded moment ratio
members = stress_set_k_alpha(10.0, 400)
big = TruncatedSubGenerator.build(law, 400)
for t_idx, t in enumerate((1, 2, 4, 8, 16)):
    worst = 0.0
    for mu in members:
        d = conditioned_flow(big, mu, [t])[0]
        worst = max(worst, np.abs(d.mass[:3] - geo[:3]).max())
    print(f"t={t:2d}: worst |mu T_t(x) - nu*(x)| over x<=3 and 20 starts = {worst:.2e}")
