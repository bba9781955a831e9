"""Experiment drivers: each returns a result table plus named pass/fail checks.

The command line runner and the acceptance suite both go through these
functions, so a subcommand's exit status is exactly the conjunction of the
checks reported here.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from . import exact
from .branching import (MultitypeState, fit_large_deviation, simulate_branching,
                        simulate_coupled, simulate_reflected_gw)
from .fv import (finite_difference_generator, generator_psi, lyapunov_rhs, psi,
                 stationary_run)
from .gw_model import OffspringLaw, beta, drift, exp_moment_bound
from .seeding import derive_seed, generator
from .stats import (ci_from_batches, correlation_check, increasing_trend,
                    semigroup_gap, stationary_sweep, strictly_decreasing, trend_slope,
                    tv_distance)


@dataclass
class Outcome:
    rows: list[dict]
    checks: dict[str, bool] = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    extra_tables: dict[str, list[dict]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def is_binary(law: OffspringLaw) -> bool:
    return law.max_offspring == 2 and law.p(1) == 0


def binary_qsd(law: OffspringLaw, L: int) -> np.ndarray:
    """Geometric minimal QSD of a binary law: success probability ``v / p(0)``."""
    a = drift(law) / law.p0
    return a * (1 - a) ** np.arange(L)


# --------------------------------------------------------------------------
# exact numerics


def run_qsd(law: OffspringLaw, L: int = 200, zs: Sequence[float] = tuple(np.arange(1, 10) / 10),
            tol: float = 1e-6, geometric_tol: float = 1e-8, table_size: int = 20) -> Outcome:
    """Minimal QSD three ways: Yaglom iteration, inverse iteration and the closed-form
    generating function."""
    tic = time.perf_counter()
    gen = exact.TruncatedSubGenerator.build(law, L)
    y = exact.yaglom_qsd(gen)
    e = exact.eigen_qsd(gen)
    zs = np.asarray(zs, dtype=float)
    g_closed = exact.gf_minimal_qsd(law, zs)
    g_y = exact.gf_of(y.dist, zs)
    g_e = exact.gf_of(e.dist, zs)
    elapsed = time.perf_counter() - tic
    atom_diff = float(np.abs(y.dist.mass - e.dist.mass).max())
    gf_diff = float(max(np.abs(g_y - g_closed).max(), np.abs(g_e - g_closed).max()))
    rows = []
    geo = binary_qsd(law, L) if is_binary(law) else None
    for x in range(1, min(table_size, L) + 1):
        row = {"x": x, "nu_yaglom": y.dist[x], "nu_eigen": e.dist[x]}
        if geo is not None:
            row["nu_geometric"] = float(geo[x - 1])
        rows.append(row)
    gf_rows = [{"z": float(z), "G_yaglom": float(a), "G_eigen": float(b), "G_closed": float(c)}
               for z, a, b, c in zip(zs, g_y, g_e, g_closed)]
    checks = {"atoms_agree": atom_diff < tol, "generating_functions_agree": gf_diff < tol}
    info = {"theta_yaglom": y.theta, "theta_eigen": e.theta, "yaglom_iterations": y.iterations,
            "max_atom_diff": atom_diff, "max_gf_diff": gf_diff, "seconds": elapsed}
    if geo is not None:
        geo_diff = float(max(np.abs(y.dist.mass - geo).max(), np.abs(e.dist.mass - geo).max()))
        checks["matches_geometric"] = geo_diff < geometric_tol
        info["max_geometric_diff"] = geo_diff
    return Outcome(rows, checks, info, {"gf_grid": gf_rows})


def run_uniform_yaglom(law: OffspringLaw, alpha: float = 10.0,
                       times: Sequence[float] = (1, 2, 4, 8, 16), sites: Sequence[int] = (1, 2, 3),
                       L: int = 400, tol: float = 1e-3) -> Outcome:
    """Worst case over the ``K(alpha)`` stress set of ``|mu T_t(x) - nu*(x)|``."""
    gen = exact.TruncatedSubGenerator.build(law, L)
    nu = exact.yaglom_qsd(gen).dist.mass
    members = exact.stress_set_k_alpha(alpha, L)
    idx = np.asarray(sites) - 1
    sup = np.zeros(len(times))
    for mu in members:
        flow = exact.conditioned_flow(gen, mu, times)
        for k, d in enumerate(flow):
            sup[k] = max(sup[k], float(np.abs(d.mass[idx] - nu[idx]).max()))
    rows = [{"t": float(t), "sup_gap": float(s)} for t, s in zip(times, sup)]
    checks = {"final_gap_below_tol": sup[-1] < tol,
              "sup_nonincreasing": bool(np.all(np.diff(sup) <= 0))}
    return Outcome(rows, checks, {"members": len(members), "alpha": alpha})


# --------------------------------------------------------------------------
# particle system


def nu_star(law: OffspringLaw, L: int = 400) -> np.ndarray:
    if is_binary(law):
        return binary_qsd(law, L)
    return exact.yaglom_qsd(exact.TruncatedSubGenerator.build(law, L)).dist.mass


def run_simulate(law: OffspringLaw, N: int, horizon: float, burn_in: float, seed: int,
                 rho: float | None = None, batches: int = 20, table_size: int = 20) -> Outcome:
    """One stationary run with batch-means intervals on ``m(x)`` and the scalars."""
    st = stationary_run(law, N, horizon, seed, burn_in=burn_in, rho=rho, batches=batches)
    nu = nu_star(law)
    mb = st.m_batches()
    rows = []
    for x in range(1, table_size + 1):
        col = mb[:, x - 1] if x - 1 < mb.shape[1] else np.zeros(st.batches)
        mean, hw = ci_from_batches(col)
        rows.append({"x": x, "m_bar": mean, "half_width": hw, "nu_star": float(nu[x - 1])})
    scalars = {}
    for name in ("psi", "R", "exp_rho_R", "m1m2"):
        mean, hw = ci_from_batches(st.batch_means(name))
        scalars[name] = {"mean": mean, "half_width": hw}
    tv = tv_distance(st.m_bar(), nu)
    info = {"tv": tv, "events": st.events, "max_site": st.max_site, "rho": st.rho,
            "scalars": scalars, "seconds": st.wall_time}
    return Outcome(rows, {"tv_in_unit_interval": 0.0 <= tv <= 1.0}, info)


def random_configurations(n: int, Ns: Sequence[int], max_position: int, seed: int):
    """``n`` configurations cycling through ``Ns``: a rightmost site ``R`` uniform on
    ``1..max_position``, one particle at ``R`` and the others uniform on ``1..R``."""
    rng = generator(seed, 0)
    out = []
    for k in range(n):
        N = int(Ns[k % len(Ns)])
        R = int(rng.integers(1, max_position + 1))
        xi = rng.integers(1, R + 1, size=N)
        xi[rng.integers(N)] = R
        out.append(xi)
    return out


def run_lyapunov(law: OffspringLaw, n: int = 1000, Ns: Sequence[int] = (10, 50, 200),
                 max_position: int = 50, seed: int = 0) -> Outcome:
    """Exact ``L^N psi`` against the drift bound on random configurations."""
    rows = []
    for xi in random_configurations(n, Ns, max_position, seed):
        lhs = generator_psi(law, xi)
        rhs = lyapunov_rhs(law, xi)
        rows.append({"N": xi.size, "R": int(xi.max()), "psi": psi(xi), "generator_psi": lhs,
                     "bound": rhs, "violated": int(lhs > rhs)})
    bad = sum(r["violated"] for r in rows)
    info = {"violations": bad, "configs": n,
            "tightest_constant": tightest_lyapunov_constant(
                law, random_configurations(n, Ns, max_position, seed))}
    return Outcome(rows, {"no_violations": bad == 0}, info)


def tightest_lyapunov_constant(law: OffspringLaw, configs) -> float:
    """Smallest ``c`` with ``L^N psi <= -v psi + c p(0) R^2 / N + C0`` on ``configs``
    (the drift bound uses ``c = 24``)."""
    v = drift(law)
    c0 = 2 * law.p0 + float(np.sum(law.probs[2:] * np.arange(1, law.probs.size - 1) ** 2))
    worst = -math.inf
    for xi in configs:
        xi = np.asarray(xi)
        R = float(xi.max())
        need = (generator_psi(law, xi) + v * psi(xi) - c0) * xi.size / (law.p0 * R * R)
        worst = max(worst, need)
    return float(worst)


def generator_test_functions(rho: float = 0.2):
    return {
        "m1": lambda p: float(np.mean(p == 1)),
        "psi": psi,
        "exp_rho_R": lambda p: math.exp(rho * p.max()),
    }


def run_generator_oracle(law: OffspringLaw, configs: int = 10, Ns: Sequence[int] = (2, 4, 6, 8),
                         max_position: int = 6, h: float = 1e-3, replicas: int = 10**6,
                         seed: int = 0, threads: int = 1) -> Outcome:
    """Finite-difference Monte Carlo of ``L^N f`` against exact enumeration."""
    fs = generator_test_functions()
    rows = []
    for c, xi in enumerate(random_configurations(configs, Ns, max_position, seed)):
        res = finite_difference_generator(law, list(fs.values()), xi, h=h, replicas=replicas,
                                          seed=derive_seed(seed, c), threads=threads)
        for name, r in zip(fs, res):
            rows.append({"config": c, "xi": " ".join(map(str, xi)), "f": name,
                         "exact": r.exact, "estimate": r.estimate, "stderr": r.stderr,
                         "z": r.z_score})
    worst = max(abs(r["z"]) for r in rows)
    return Outcome(rows, {"within_3_sigma": worst <= 3.0}, {"max_abs_z": worst})


def run_sweep(law: OffspringLaw, Ns: Sequence[int], horizon: float, burn_in: float, runs: int,
              seed: int, selection_N: Sequence[int] | None = None,
              trend_N: Sequence[int] | None = None, rho: float | None = None,
              tv_max: float = 0.05, threads: int = 1) -> Outcome:
    """Stationary N-sweep: selection principle, chaos, psi trend and exponential moment."""
    selection_N = list(selection_N or Ns)
    trend_N = list(trend_N or Ns)
    b = beta(law)
    rho = b / 4 if rho is None else rho
    grid = sorted(set(Ns) | set(selection_N) | set(trend_N))
    nu = nu_star(law)
    sw = stationary_sweep(law, grid, horizon, burn_in, runs, seed, rho, nu, threads=threads)
    rows = [dict(vars(r)) for r in sw.rows]
    sel = [sw.row(N) for N in selection_N]
    tr = [sw.row(N) for N in trend_N]
    psi_se = [r.psi_hw / _t975(r.runs) for r in tr]
    slope, slope_se = trend_slope([r.N for r in tr], [r.psi for r in tr], psi_se)
    base = tr[0]
    checks = {
        "tv_strictly_decreasing": strictly_decreasing([r.tv for r in sel]),
        "tv_largest_N_small": sel[-1].tv < tv_max,
        "chaos_strictly_decreasing": strictly_decreasing([r.chaos_dev for r in sel]),
        "psi_no_increasing_trend": not increasing_trend([r.N for r in tr], [r.psi for r in tr],
                                                        psi_se),
        "exp_moment_over_N_bounded": all(
            r.exp_moment_over_N <= base.exp_moment_over_N + 3 * math.hypot(r.exp_moment_se,
                                                                           base.exp_moment_se)
            for r in tr[1:]),
    }
    info = {"rho": rho, "beta": b, "psi_slope": slope, "psi_slope_se": slope_se,
            "seeds": sw.seeds, "selection_N": selection_N, "trend_N": trend_N}
    return Outcome(rows, checks, info)


def _t975(n: int) -> float:
    return float(sps.t.ppf(0.975, n - 1))


def run_chaos(law: OffspringLaw, Ns: Sequence[int], t: float, pairs: Sequence[tuple[int, int]],
              replicas: int, seed: int, threads: int = 1) -> Outcome:
    rows = []
    for c, N in enumerate(Ns):
        for x, y in pairs:
            r = correlation_check(law, N, t, x, y, replicas, seed, cell=c, threads=threads)
            rows.append({"N": N, "t": t, "x": x, "y": y, "estimate": r.estimate,
                         "sigma": r.sigma, "bound": r.bound, "margin": r.margin})
    return Outcome(rows, {"all_under_bound": all(r["margin"] >= 0 for r in rows)})


def run_semigroup(law: OffspringLaw, Ns: Sequence[int], t: float, replicas: int, seed: int,
                  grid: int = 21, method: str = "evolution", L: int = 64, K: int = 16,
                  factor: float = 2.0, threads: int = 1) -> Outcome:
    """Gap between the mean empirical measure and the conditioned flow from all-at-1."""
    rows = []
    zero = [semigroup_gap(law, None, 0.0, N=N, L=L, K=K).max_gap for N in Ns]
    for c, N in enumerate(Ns):
        g = semigroup_gap(law, None, t, N=N, replicas=replicas, seed=seed, L=L, K=K, grid=grid,
                          method=method, cell=c, threads=threads)
        rows.append({"N": N, "t": t, "max_gap": g.max_gap, "argmax_x": g.argmax,
                     "stderr": g.max_stderr, "gap_times_N": g.max_gap * N,
                     "gap_x1": float(g.gap[0]), "gap_x2": float(g.gap[1]),
                     "gap_x3": float(g.gap[2]), "replicas": g.replicas})
    scaled = [r["gap_times_N"] for r in rows]
    checks = {
        "gap_zero_at_t0": all(z == 0.0 for z in zero),
        "gap_decreases": rows[-1]["max_gap"] < rows[0]["max_gap"],
        "gap_N_within_factor": max(scaled) <= factor * min(scaled),
    }
    return Outcome(rows, checks, {"method": method})


# --------------------------------------------------------------------------
# branching and reflected process


def run_coupling(law: OffspringLaw, Ns: Sequence[int], seeds: int, horizon: float,
                 seed: int) -> Outcome:
    rows = []
    for N in Ns:
        for s in range(seeds):
            run = simulate_coupled(law, np.ones(N, dtype=np.int64), horizon,
                                   derive_seed(seed, N, s))
            rows.append({"N": N, "replica": s, "events": run.events, "checks": run.checks,
                         "zeta_size": run.zeta.size, "R_zeta": run.zeta.rightmost,
                         "R_xi": int(run.xi.max()),
                         "attachment_violations": run.violations_attachment,
                         "domination_violations": run.violations_domination})
    checks = {"attachment_invariant": all(r["attachment_violations"] == 0 for r in rows),
              "rightmost_domination": all(r["domination_violations"] == 0 for r in rows)}
    return Outcome(rows, checks, {"event_checks": sum(r["checks"] for r in rows)})


def run_growth(law: OffspringLaw, initial: int, times: Sequence[float], replicas: int,
               seed: int) -> Outcome:
    """Mean population of the branching process against ``|zeta_0| exp(q_bar t)``."""
    z0 = MultitypeState.from_particles(np.ones(initial, dtype=np.int64))
    sizes = np.array([simulate_branching(law, z0, max(times), derive_seed(seed, r),
                                         sample_times=times).sizes for r in range(replicas)])
    rows = []
    for k, t in enumerate(times):
        mean = float(sizes[:, k].mean())
        se = float(sizes[:, k].std(ddof=1) / math.sqrt(replicas))
        target = initial * math.exp(law.p0 * t)
        rows.append({"t": float(t), "mean_size": mean, "stderr": se, "expected": target,
                     "z": (mean - target) / se})
    return Outcome(rows, {"growth_within_3_sigma": all(abs(r["z"]) <= 3 for r in rows)})


def run_rightmost_moment(law: OffspringLaw, N: int, t: float, replicas: int, seed: int,
                         rho: float | None = None) -> Outcome:
    """``E exp(rho R(zeta_t)) <= E|zeta_t| E exp(rho Z~_t)`` from the same start, within 3 sigma."""
    rho = beta(law) / 4 if rho is None else rho
    xi0 = np.ones(N, dtype=np.int64)
    z0 = MultitypeState.from_particles(xi0)
    runs = [simulate_branching(law, z0, t, derive_seed(seed, r)) for r in range(replicas)]
    er = np.exp(rho * np.array([r.rightmost[-1] for r in runs], dtype=float))
    size = np.array([r.sizes[-1] for r in runs], dtype=float)
    refl = simulate_reflected_gw(law, int(xi0.max()), t, seed, n_replicas=replicas, cell=2)
    ez, ez_se = refl.exp_moment(rho)
    lhs, lhs_se = float(er.mean()), float(er.std(ddof=1) / math.sqrt(replicas))
    s_mean, s_se = float(size.mean()), float(size.std(ddof=1) / math.sqrt(replicas))
    rhs = s_mean * ez
    rhs_se = math.hypot(s_se * ez, s_mean * ez_se)
    row = {"N": N, "t": t, "rho": rho, "lhs": lhs, "lhs_se": lhs_se, "rhs": rhs, "rhs_se": rhs_se}
    return Outcome([row], {"rightmost_moment_dominated": lhs <= rhs + 3 * math.hypot(lhs_se, rhs_se)})


def run_reflected(law: OffspringLaw, rho: float, x0: int, t: float, replicas: int, seed: int,
                  ld_x0: int = 40, ld_T: float = 1.0, ld_deltas: Sequence[float] = (10, 20, 30),
                  ld_replicas: int = 10**5) -> Outcome:
    smp = simulate_reflected_gw(law, x0, t, seed, n_replicas=replicas, cell=0)
    est, se = smp.exp_moment(rho)
    bound = exp_moment_bound(law, rho, x0, t)
    ld = simulate_reflected_gw(law, ld_x0, ld_T, seed, n_replicas=ld_replicas, cell=1)
    fit = fit_large_deviation(ld, ld_deltas)
    rows = [{"quantity": "exp_moment", "param": float(rho), "estimate": est, "stderr": se,
             "bound": bound}]
    rows += [{"quantity": "ld_exceedance", "param": float(d), "estimate": float(f),
              "stderr": float(math.sqrt(f * (1 - f) / ld_replicas)), "bound": float(b)}
             for d, f, b in zip(fit.deltas, fit.frequencies, fit.bounds)]
    checks = {"exp_moment_under_bound": est + 3 * se <= bound,
              "never_visits_zero": smp.visited_zero == 0 and ld.visited_zero == 0
              and int(smp.final.min()) >= 1,
              "ld_monotone": fit.monotone, "ld_under_fitted_bound": fit.under_bound}
    return Outcome(rows, checks, {"kappa": fit.kappa, "beta": beta(law)})
