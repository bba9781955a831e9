import math

import numpy as np
import pytest
from scipy import linalg

from qsdfv.branching import (InvariantViolation, MultitypeState, PopulationCapError,
                             coupled_replicas, fit_large_deviation, reflected_path,
                             simulate_branching, simulate_coupled, simulate_reflected_gw,
                             write_coupling_csv)
from qsdfv.experiments import run_rightmost_moment
from qsdfv.fv import replicas_occupation
from qsdfv.gw_model import exp_moment_bound
from qsdfv.seeding import derive_seed


def reflected_generator(law, L):
    """Reflected chain on 1..L (mass leaving past L goes to an extra sink)."""
    Q = np.zeros((L + 1, L + 1))
    for x in range(1, L + 1):
        for l, p in enumerate(law.probs):
            y = x + l - 1
            if l == 1 or p == 0 or y == 0:
                continue
            Q[x - 1, min(y, L + 1) - 1] += x * p
    Q[np.diag_indices(L + 1)] = -Q.sum(axis=1)
    return Q


def test_state_bookkeeping():
    s = MultitypeState(2, [0, 1, 1], [1, 4, 2])
    assert s.size == 3 and s.rightmost == 4 and s.type_sizes().tolist() == [1, 2]
    s.move(1, 1)
    assert s.rightmost == 2 and s.count(1, 4) == 0 and s.count(1, 1) == 1
    k = s.add(0, 9)
    assert s.position(k) == 9 and s.rightmost == 9
    s.check()
    with pytest.raises(ValueError):
        MultitypeState(2, [0, 2], [1, 1])


def test_zero_horizon_keeps_state(law):
    z0 = MultitypeState.from_particles([1, 2, 5])
    run = simulate_branching(law, z0, 0.0, seed=1, sample_times=[0.0])
    assert run.sizes.tolist() == [3] and run.rightmost.tolist() == [5]
    assert z0.size == 3


def test_single_type_is_pure_reflected_motion(law):
    z0 = MultitypeState(1, [0], [2])
    n, t = 4000, 1.0
    finals = np.array([simulate_branching(law, z0, t, derive_seed(3, r)).final.position(0)
                       for r in range(n)])
    P = linalg.expm(t * reflected_generator(law, 60))
    expected = P[1, :8]
    freq = np.bincount(finals, minlength=9)[1:9] / n
    se = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(freq - expected) <= 4 * se + 1e-12)
    assert finals.min() >= 1


def test_mean_growth(law):
    z0 = MultitypeState.from_particles(np.ones(10, dtype=np.int64))
    sizes = np.array([simulate_branching(law, z0, 1.0, derive_seed(8, r)).sizes[0]
                      for r in range(3000)])
    se = sizes.std(ddof=1) / math.sqrt(sizes.size)
    assert abs(sizes.mean() - 10 * math.exp(0.75)) < 3.5 * se


def test_population_cap(law):
    z0 = MultitypeState.from_particles(np.ones(10, dtype=np.int64))
    with pytest.raises(PopulationCapError) as err:
        simulate_branching(law, z0, 10.0, seed=1, cap=50)
    assert err.value.partial is not None and not err.value.partial.complete


def test_coupling_invariants_strict(law):
    for s in range(20):
        run = simulate_coupled(law, [1, 1, 3, 2, 1], 2.0, seed=s, strict=True)
        assert run.dominated and run.checks == run.events + 1
        assert int(run.xi.max()) <= run.zeta.rightmost
        for i, k in enumerate(run.attach):
            assert run.zeta.types[k] == i and run.zeta.position(k) == run.xi[i]


def test_coupling_requires_two_particles(law):
    with pytest.raises(ValueError):
        simulate_coupled(law, [1], 1.0, seed=0)


def test_coupled_marginal_matches_particle_simulator(law):
    n, N = 10_000, 5
    m1 = np.array([np.mean(simulate_coupled(law, np.ones(N, dtype=np.int64), 1.0,
                                            derive_seed(9, r), check=False).xi == 1)
                   for r in range(n)])
    occ = replicas_occupation(law, np.ones(N, dtype=np.int64), 1.0, n, seed=10)
    ref = occ[:, 1] / N
    se = math.hypot(m1.std(ddof=1), ref.std(ddof=1)) / math.sqrt(n)
    assert abs(m1.mean() - ref.mean()) < 3 * se


def test_coupling_csv(tmp_path, law):
    runs = coupled_replicas(law, [1, 1, 2], 1.0, 5, seed=3)
    p = tmp_path / "c.csv"
    write_coupling_csv(p, 1.0, runs)
    lines = p.read_text().splitlines()
    assert lines[0] == "replica,t,zeta_size,R_zeta,R_xi,dominated" and len(lines) == 6


def test_reflected_never_hits_zero(law):
    ts, zs = reflected_path(law, 1, 30.0, seed=2)
    assert zs.min() >= 1 and ts[0] == 0.0 and len(zs) > 10
    smp = simulate_reflected_gw(law, 1, 20.0, seed=2, n_replicas=2000)
    assert smp.visited_zero == 0 and smp.final.min() >= 1


def test_reflected_exp_moment_under_bound(law):
    smp = simulate_reflected_gw(law, 5, 2.0, seed=4, n_replicas=20_000)
    est, se = smp.exp_moment(0.2)
    assert est + 3 * se <= exp_moment_bound(law, 0.2, 5, 2.0)


def test_reflected_mean_matches_generator(law):
    smp = simulate_reflected_gw(law, 3, 1.0, seed=5, n_replicas=20_000)
    P = linalg.expm(reflected_generator(law, 80))
    mean = np.dot(P[2, :80], np.arange(1, 81))
    assert smp.final.mean() == pytest.approx(mean, abs=4 * smp.final.std() / math.sqrt(20_000))


def test_large_deviation_shape(law):
    smp = simulate_reflected_gw(law, 40, 1.0, seed=6, n_replicas=20_000)
    fit = fit_large_deviation(smp, [5, 10, 20])
    assert fit.monotone and fit.under_bound
    assert 0 < fit.kappa < math.inf
    assert smp.sup_excess.min() >= 0  # at s = 0 the excess is exactly 0


def test_rightmost_moment_domination(law):
    out = run_rightmost_moment(law, 4, 1.0, 1500, seed=3)
    assert out.passed
