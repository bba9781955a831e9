"""The twelve acceptance criteria, each at its stated size and tolerance.

Every Monte Carlo criterion uses the master seed below; each test logs one
``CRITERION k: PASS|FAIL`` line (also repeated in the terminal summary).
"""
import math
import time

import numpy as np
import pytest

from qsdfv import experiments as ex
from qsdfv.gw_model import beta, binary_law
from qsdfv.stats import correlation_check, semigroup_gap

SEED = 2024
LAW = binary_law(0.75)


@pytest.fixture(scope="module")
def sweep():
    tic = time.perf_counter()
    out = ex.run_sweep(LAW, [25, 50, 100, 200, 400, 800], horizon=500.0, burn_in=50.0, runs=64,
                       seed=SEED, selection_N=[25, 100, 400], trend_N=[50, 200, 800],
                       rho=beta(LAW) / 4)
    out.info["seconds"] = time.perf_counter() - tic
    return out


def _rows(out, key="N"):
    return {r[key]: r for r in out.rows}


def test_criterion_01_qsd_triple_agreement(record):
    tic = time.perf_counter()
    out = ex.run_qsd(LAW, L=200, zs=np.arange(1, 10) / 10, tol=1e-6, geometric_tol=1e-8)
    secs = time.perf_counter() - tic
    ok = out.passed and secs < 10
    i = out.info
    record(1, ok, f"atoms {i['max_atom_diff']:.1e}, gf {i['max_gf_diff']:.1e}, "
                  f"geometric {i['max_geometric_diff']:.1e}, {secs:.2f}s")
    assert ok, out.checks


def test_criterion_02_selection_principle(record, sweep):
    r = _rows(sweep)
    tvs = [r[N]["tv"] for N in (25, 100, 400)]
    ok = sweep.checks["tv_strictly_decreasing"] and sweep.checks["tv_largest_N_small"] \
        and sweep.info["seconds"] < 600
    record(2, ok, "TV(m_bar, nu*) at N=25,100,400: " + ", ".join(f"{t:.5f}" for t in tvs)
           + f" ({sweep.info['seconds']:.0f}s for the whole sweep)")
    assert ok


def test_criterion_03_propagation_of_chaos(record, sweep):
    r = _rows(sweep)
    devs = [r[N]["chaos_dev"] for N in (25, 100, 400)]
    ok = sweep.checks["chaos_strictly_decreasing"]
    record(3, ok, "|E m(1)m(2) - nu*(1)nu*(2)| at N=25,100,400: "
           + ", ".join(f"{d:.2e}" for d in devs))
    assert ok


def test_criterion_04_correlation_bound(record):
    tic = time.perf_counter()
    c = correlation_check(LAW, 200, 1.0, 1, 1, 10_000, seed=SEED)
    secs = time.perf_counter() - tic
    ok = c.estimate + 3 * c.sigma <= c.bound and secs < 300
    record(4, ok, f"estimate {c.estimate:.2e} + 3 sigma {3 * c.sigma:.1e} <= bound "
                  f"{c.bound:.4f}, {secs:.1f}s")
    assert ok


def test_criterion_05_semigroup_closeness(record):
    out = ex.run_semigroup(LAW, [100, 200, 400], 1.0, replicas=20_000, seed=SEED, grid=21)
    zero = semigroup_gap(LAW, None, 0.0, N=100).max_gap
    scaled = [r["gap_times_N"] for r in out.rows]
    ok = out.checks["gap_N_within_factor"] and zero == 0.0 and out.checks["gap_zero_at_t0"]
    record(5, ok, "gap*N at N=100,200,400: "
           + ", ".join(f"{s:.4f}+-{r['stderr'] * r['N']:.4f}" for s, r in zip(scaled, out.rows))
           + f"; gap(t=0) = {zero}")
    assert ok


def test_criterion_06_lyapunov_drift(record):
    tic = time.perf_counter()
    out = ex.run_lyapunov(LAW, n=1000, Ns=(10, 50, 200), max_position=50, seed=SEED)
    secs = time.perf_counter() - tic
    ok = out.passed and secs < 60 and max(r["R"] for r in out.rows) <= 50
    worst = max(r["generator_psi"] - r["bound"] for r in out.rows)
    record(6, ok, f"{out.info['violations']} violations in 1000 configurations "
                  f"(max L psi - bound = {worst:.3f}), {secs:.1f}s")
    assert ok


def test_criterion_07_generator_oracle(record):
    out = ex.run_generator_oracle(LAW, configs=10, h=1e-3, replicas=10**6, seed=SEED)
    ok = out.passed and len(out.rows) == 30
    record(7, ok, f"30 comparisons, max |z| = {out.info['max_abs_z']:.2f}")
    assert ok


def test_criterion_08_coupling_invariants(record):
    out = ex.run_coupling(LAW, [2, 5, 20], seeds=100, horizon=2.0, seed=SEED)
    bad = sum(r["attachment_violations"] + r["domination_violations"] for r in out.rows)
    ok = out.passed and len(out.rows) == 300
    record(8, ok, f"{bad} violations over {out.info['event_checks']} event checks in 300 runs")
    assert ok


def test_criterion_09_branching_growth(record):
    out = ex.run_growth(LAW, 10, [0.5, 1.0], replicas=10_000, seed=SEED)
    ok = out.passed
    record(9, ok, "; ".join(f"t={r['t']}: {r['mean_size']:.3f} vs {r['expected']:.3f} "
                            f"(z={r['z']:+.2f})" for r in out.rows))
    assert ok


def test_criterion_10_reflected_exp_moment(record):
    out = ex.run_reflected(LAW, 0.2, 5, 2.0, replicas=10**5, seed=SEED)
    r = out.rows[0]
    ok = r["estimate"] + 3 * r["stderr"] <= r["bound"] and r["bound"] == pytest.approx(4.90, abs=0.01)
    record(10, ok, f"E exp(0.2 Z) = {r['estimate']:.4f} +- {r['stderr']:.4f} <= {r['bound']:.4f}")
    assert ok


def test_criterion_11_uniform_yaglom(record):
    out = ex.run_uniform_yaglom(LAW, alpha=10.0, times=(1, 2, 4, 8, 16), sites=(1, 2, 3), L=400)
    sup16 = out.rows[-1]["sup_gap"]
    ok = out.info["members"] == 20 and sup16 < 1e-3
    record(11, ok, "sup gap at t=1,2,4,8,16: " + ", ".join(f"{r['sup_gap']:.2e}" for r in out.rows))
    assert ok


def test_criterion_12_psi_bounded_and_exp_moment_linear(record, sweep):
    r = _rows(sweep)
    psis = ", ".join(f"{r[N]['psi']:.4f}+-{r[N]['psi_hw']:.4f}" for N in (50, 200, 800))
    exps = ", ".join(f"{r[N]['exp_moment_over_N']:.5f}" for N in (50, 200, 800))
    ok = sweep.checks["psi_no_increasing_trend"] and sweep.checks["exp_moment_over_N_bounded"]
    record(12, ok, f"psi_bar at N=50,200,800: {psis} (slope {sweep.info['psi_slope']:.4f} "
                   f"+- {sweep.info['psi_slope_se']:.4f} per log N); "
                   f"exp(rho R)/N: {exps}")
    assert sweep.checks["exp_moment_over_N_bounded"]
    assert sweep.checks["psi_no_increasing_trend"], "psi_bar increases with N"
