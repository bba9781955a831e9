import math
import warnings

import numpy as np
import pytest
from scipy import linalg

from qsdfv.exact import (DistributionVector, TruncatedSubGenerator, TruncationWarning,
                         UnderflowError, classify_K_alpha, conditioned_drift, conditioned_flow,
                         conditioned_semigroup, eigen_qsd, gf_branching, gf_conditioned,
                         gf_minimal_qsd, gf_of, moment_ratio, read_distribution_csv,
                         stress_set_k_alpha, tv, write_distribution_csv, yaglom_qsd)

LAM, MU = 0.25, 0.75  # birth and death rates of the binary law


def bd_gf(z, t):
    """Generating function of the linear birth-death process from one individual."""
    return 1 - (MU - LAM) * (1 - z) / ((MU - LAM * z) * math.exp((MU - LAM) * t) - LAM * (1 - z))


@pytest.fixture(scope="module")
def gen(law):
    return TruncatedSubGenerator.build(law, 200)


def test_generator_rows_conserve_rate(gen):
    for x, entries, kill, lost in gen.rows():
        out = sum(r for _, r in entries) + kill + lost
        assert out == pytest.approx(-gen.matrix[x - 1, x - 1], rel=1e-14)
    assert gen.kill_rate[0] == 0.75 and gen.kill_rate[1:].sum() == 0
    assert gen.lost_rate[-1] == pytest.approx(200 * 0.25)


def test_propagator_matches_expm(law):
    g = TruncatedSubGenerator.build(law, 40)
    P = g.propagator(0.7)
    E = linalg.expm(0.7 * g.augmented())
    assert np.abs(P - E).max() < 1e-8
    with pytest.raises(ValueError, match="stability"):
        g.propagator(1.0, dt=1.0)


def test_semigroup_t0_identity(gen):
    mu = DistributionVector.point_mass(3, 200)
    r = conditioned_semigroup(gen, mu, 0.0)
    assert r.dist is mu and r.surviving_mass == 1.0


def test_semigroup_survival_matches_birth_death(gen):
    for t in (0.5, 1.0, 5.0):
        r = conditioned_semigroup(gen, DistributionVector.point_mass(1, 200), t)
        assert r.surviving_mass == pytest.approx(1 - bd_gf(0.0, t), rel=1e-8)


def test_semigroup_generating_function_matches_closed_form(gen):
    t = 2.0
    r = conditioned_semigroup(gen, DistributionVector.point_mass(1, 200), t)
    for z in (0.2, 0.5, 0.8):
        expected = (bd_gf(z, t) - bd_gf(0.0, t)) / (1 - bd_gf(0.0, t))
        assert gf_of(r.dist, z) == pytest.approx(expected, abs=1e-9)
        assert gf_conditioned(gen.law, DistributionVector.point_mass(1, 200), t, z) == \
            pytest.approx(expected, abs=1e-12)


def test_semigroup_long_horizon_reaches_geometric(gen, nu_geo):
    r = conditioned_semigroup(gen, DistributionVector.point_mass(1, 200), 50.0)
    assert r.surviving_mass < 1e-10
    assert tv(r.dist.mass, nu_geo[:200]) < 1e-9


def test_semigroup_underflow_and_leak_warnings(law):
    small = TruncatedSubGenerator.build(law, 30)
    with pytest.raises(UnderflowError):
        conditioned_semigroup(small, DistributionVector.point_mass(1, 30), 80.0)
    with pytest.warns(TruncationWarning):
        conditioned_semigroup(small, DistributionVector.point_mass(25, 30), 1.0)


def test_flow_consistent_with_single_calls(gen):
    mu = DistributionVector.point_mass(2, 200)
    flow = conditioned_flow(gen, mu, [0.5, 1.5, 3.0])
    direct = conditioned_semigroup(gen, mu, 3.0).dist
    assert tv(flow[-1].mass, direct.mass) < 1e-10


def test_conditioned_drift_vanishes_at_qsd(gen, nu_geo):
    d = conditioned_drift(gen, DistributionVector(nu_geo[:200] / nu_geo[:200].sum()))
    assert np.abs(d).max() < 1e-12


def test_yaglom_and_eigen_agree_with_geometric(gen, nu_geo):
    y = yaglom_qsd(gen)
    e = eigen_qsd(gen)
    assert np.abs(y.dist.mass - nu_geo[:200]).max() < 1e-8
    assert np.abs(e.dist.mass - nu_geo[:200]).max() < 1e-12
    assert y.theta == pytest.approx(0.5, abs=1e-8)
    assert e.theta == pytest.approx(0.5, abs=1e-12)


def test_gf_minimal_closed_form(law):
    z = np.linspace(0.0, 0.95, 20)
    assert np.allclose(gf_minimal_qsd(law, z), 2 * z / (3 - z), atol=1e-12)
    assert gf_minimal_qsd(law, 1 - 1e-8) == pytest.approx(2 * (1 - 1e-8) / (2 + 1e-8), abs=1e-9)
    with pytest.raises(ValueError):
        gf_minimal_qsd(law, 1.0)


def test_gf_minimal_other_law(geo_law):
    gen = TruncatedSubGenerator.build(geo_law, 200)
    nu = eigen_qsd(gen).dist
    z = np.array([0.1, 0.5, 0.9])
    assert np.allclose(gf_of(nu, z), gf_minimal_qsd(geo_law, z), atol=1e-9)


def test_gf_branching_binary(law):
    for t in (0.0, 0.3, 1.0, 5.0):
        for z in (0.0, 0.4, 0.9):
            assert gf_branching(law, z, t) == pytest.approx(bd_gf(z, t), abs=1e-13)


def test_gf_conditioned_long_time_no_underflow(law):
    # survival ~ e^{-30}: the direct 1 - F route would lose every digit
    val = gf_conditioned(law, DistributionVector.point_mass(1, 10), 60.0, 0.5)
    assert val == pytest.approx(2 * 0.5 / 2.5, abs=1e-9)


def test_distribution_vector_validation():
    with pytest.raises(ValueError):
        DistributionVector(np.array([0.5, 0.4]))
    with pytest.raises(ValueError):
        DistributionVector(np.array([1.5, -0.5]))
    d = DistributionVector.normalized([1, 1, 2])
    assert d[3] == 0.5 and d[7] == 0.0
    assert d.moment(1) == pytest.approx(0.25 + 0.5 + 1.5)


def test_stress_set_in_K_alpha():
    members = stress_set_k_alpha(10.0, 400)
    assert len(members) == 20
    assert all(classify_K_alpha(m, 10.0) for m in members)
    assert max(moment_ratio(m) for m in members) > 9.9
    assert not classify_K_alpha(DistributionVector.point_mass(11, 20), 10.0)


def test_csv_round_trip(tmp_path, nu_geo):
    d = DistributionVector.normalized(nu_geo[:30])
    p = write_distribution_csv(tmp_path / "nu.csv", d, {"law": "binary"})
    assert p.read_text().startswith("# law: binary")
    back = read_distribution_csv(p)
    assert np.array_equal(back.mass, d.mass)
