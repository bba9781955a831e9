import math

import numpy as np
import pytest

from qsdfv.fv import (ParticleConfig, apply_generator, empirical_measure, empirical_vector,
                      finite_difference_generator, generator_drift, generator_psi,
                      generator_refeed, jump_rates, lyapunov_rhs, psi, replicas_final,
                      replicas_moments, replicas_occupation, rightmost, simulate,
                      stationary_run, total_rate)
from qsdfv.seeding import derive_seed


def test_particle_config_basics():
    c = ParticleConfig([1, 3, 3, 7])
    assert c.N == 4 and c.occupation == {1: 1, 3: 2, 7: 1}
    assert c.occupation_array(8).tolist() == [0, 1, 0, 2, 0, 0, 0, 1, 0]
    c.move(0, 5)
    c.check()
    assert c.weight_index.total == 18
    with pytest.raises(ValueError):
        ParticleConfig([1])
    with pytest.raises(ValueError):
        ParticleConfig([0, 2])


def test_observables():
    xi = np.array([1, 2, 2, 5])
    assert psi(xi) == pytest.approx((1 + 4 + 4 + 25) / 10)
    assert rightmost(xi) == 5 and total_rate(xi) == 10
    assert empirical_measure(xi) == {1: 0.25, 2: 0.5, 5: 0.25}
    assert empirical_vector(xi, 3).tolist() == [0.25, 0.5, 0.0]


def test_event_stream_respects_move_rules(law):
    ev = simulate(law, [1, 1, 2, 4, 1], 20.0, seed=3, check_every=1)
    assert len(ev) > 100
    pos = ev.initial.copy()
    for i, l, old, new in zip(ev.particle, ev.offspring, ev.old, ev.new):
        assert pos[i] == old
        if l >= 2:
            assert new == old + l - 1
        elif l == 0 and old >= 2:
            assert new == old - 1
        elif l == 0:
            others = np.delete(pos, i)
            assert new in others
        pos[i] = new
    assert np.array_equal(pos, ev.final)
    assert np.array_equal(ev.state_at(20.0), ev.final)
    assert np.array_equal(ev.sample([0.0, 20.0])[1], ev.final)
    assert np.all(np.diff(ev.times) > 0) and ev.times[-1] < 20.0


def test_simulation_deterministic(law):
    a = simulate(law, [1, 2, 3], 10.0, seed=11)
    b = simulate(law, [1, 2, 3], 10.0, seed=11)
    c = simulate(law, [1, 2, 3], 10.0, seed=12)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.new, b.new)
    assert not np.array_equal(a.times[:5], c.times[:5])
    assert len(simulate(law, [1, 2], 0.0, seed=1)) == 0


def test_first_event_statistics(law):
    # first event: Exp(M1) time, particle chosen in proportion to its position
    xi = [1, 3]
    times, chosen = [], []
    for s in range(4000):
        ev = simulate(law, xi, 50.0, seed=derive_seed(5, s))
        times.append(ev.times[0])
        chosen.append(ev.particle[0])
    assert np.mean(times) == pytest.approx(1 / 4, abs=4 * 0.25 / math.sqrt(4000))
    p = np.mean(np.array(chosen) == 1)
    assert p == pytest.approx(0.75, abs=4 * math.sqrt(0.75 * 0.25 / 4000))


def test_two_particles_refeed_copies_partner(law):
    seen = 0
    for s in range(200):
        ev = simulate(law, [1, 6], 2.0, seed=s)
        pos = ev.initial.copy()
        for i, l, old, new in zip(ev.particle, ev.offspring, ev.old, ev.new):
            if l == 0 and old == 1:
                assert new == pos[1 - i]
                seen += 1
            pos[i] = new
    assert seen > 50


def test_jump_rates_total(law):
    xi = np.array([1, 1, 3])
    rates = jump_rates(law, xi)
    # l = 1 draws are null, and so is a refeed onto the particle's own site
    total = sum(r for _, _, r in rates)
    expected = (1 - law.p(1)) * xi.sum() - 2 * law.p0 / 2
    assert total == pytest.approx(expected)


@pytest.mark.parametrize("xi", [[1, 1, 2, 5], [3, 1, 1, 1, 8, 2], [2, 2], [1, 4, 4, 4, 9]])
def test_generator_representations_agree(law, geo_law, xi):
    xi = np.array(xi)
    fs = [psi, lambda p: float(np.mean(p == 1)), lambda p: float(np.exp(0.3 * p.max()))]
    for lw in (law, geo_law):
        for f in fs:
            full = apply_generator(lw, f, xi)
            assert apply_generator(lw, f, xi, symmetric=True) == pytest.approx(full, abs=1e-12)
            split = generator_refeed(lw, f, xi) + generator_drift(lw, f, xi)
            assert split == pytest.approx(full, abs=1e-12)
        assert generator_psi(lw, xi) == pytest.approx(apply_generator(lw, psi, xi), abs=1e-12)


def test_lyapunov_rhs_value(law):
    xi = np.array([1, 1, 4])
    expected = -0.5 * psi(xi) + 24 * 0.75 * 16 / 3 + (1.5 + 0.25)
    assert lyapunov_rhs(law, xi) == pytest.approx(expected)


def test_finite_difference_generator_small_case(law):
    res = finite_difference_generator(law, [psi], [1, 2, 2], h=1e-3, replicas=200_000, seed=4)
    assert abs(res[0].z_score) < 4
    assert res[0].exact == pytest.approx(apply_generator(law, psi, [1, 2, 2]))


def test_replicas_thread_invariance(law):
    xi0 = np.ones(6, dtype=np.int64)
    a = replicas_occupation(law, xi0, 1.0, 5000, seed=9, threads=1)
    b = replicas_occupation(law, xi0, 1.0, 5000, seed=9, threads=3)
    assert np.array_equal(a, b)
    c = replicas_final(law, xi0, 1.0, 3000, seed=9, threads=2)
    d = replicas_final(law, xi0, 1.0, 3000, seed=9)
    assert np.array_equal(c, d)
    assert a.sum(axis=1).tolist() == [6] * 5000


def test_moments_kernel_consistent_with_occupation(law):
    xi0 = np.ones(5, dtype=np.int64)
    occ = replicas_occupation(law, xi0, 1.0, 3000, seed=2, K=16)
    mom = replicas_moments(law, xi0, [1.0], 3000, seed=2, K=16)
    m1, m2 = mom.pooled()
    assert np.allclose(m1[0, 1:], occ[:, 1:].mean(axis=0) / 5)
    assert m2[0, 1, 2] == pytest.approx(np.mean(occ[:, 1] * occ[:, 2]) / 25)
    assert mom.replicas == 3000


def test_stationary_run_outputs(law, nu_geo):
    st = stationary_run(law, 50, 200.0, seed=3, burn_in=20.0)
    assert st.m_bar().sum() == pytest.approx(1.0, abs=1e-9)
    assert st.batches == 20 and st.batch_width == pytest.approx(9.0)
    assert st.batch_means("psi").mean() == pytest.approx(st.mean("psi"))
    assert 1.0 <= st.mean("psi") <= st.mean("R")
    assert st.pair_mean(1, 2) == pytest.approx(st.pair_mean(2, 1))
    again = stationary_run(law, 50, 200.0, seed=3, burn_in=20.0)
    assert np.array_equal(st.scalars, again.scalars)
    with pytest.raises(ValueError):
        stationary_run(law, 50, 10.0, seed=1, burn_in=10.0)
    with pytest.warns(RuntimeWarning, match="rho"):
        stationary_run(law, 5, 5.0, seed=1, rho=1.0)


def test_drift_constant_small_N(law):
    import itertools

    from qsdfv.experiments import tightest_lyapunov_constant
    for N in range(2, 6):
        configs = [np.array(c) for c in itertools.combinations_with_replacement(range(1, 9), N)]
        c = tightest_lyapunov_constant(law, configs)
        print(f"N={N}: tightest constant {c:.4f}")
        assert c <= 24
