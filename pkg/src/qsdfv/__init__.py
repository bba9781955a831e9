"""Fleming-Viot particle approximation of the minimal quasi-stationary
distribution of a subcritical Galton-Watson process.

Submodules: ``gw_model`` (offspring laws and constants), ``exact`` (truncated
generator numerics), ``fv`` (particle simulation), ``branching`` (dominating
branching process and reflected process), ``stats`` (estimators) and ``cli``.
"""
__version__ = "0.1.0"

from .gw_model import (OffspringLaw, LawError, binary_law, geometric_truncated_law,  # noqa: E402
                       truncate_law, drift, beta, gamma, constants)
from .exact import (TruncatedSubGenerator, DistributionVector, conditioned_semigroup,  # noqa: E402
                    yaglom_qsd, eigen_qsd, gf_minimal_qsd, gf_conditioned)
from .fv import ParticleConfig, simulate, stationary_run, apply_generator  # noqa: E402
from .branching import (MultitypeState, simulate_branching, simulate_coupled,  # noqa: E402
                        simulate_reflected_gw)
from .stats import tv_distance, batch_means_ci, correlation_check, semigroup_gap  # noqa: E402
