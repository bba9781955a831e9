import math

import mpmath
import numpy as np
import pytest

from qsdfv.gw_model import (LawError, OffspringLaw, beta, binary_law, constants, drift,
                            exp_moment_bound, gamma, generating_function,
                            geometric_truncated_law, gf_gap, law_from_config, law_summary, rate,
                            truncate_law)


def test_binary_drift_and_rates(law):
    assert drift(law) == pytest.approx(0.5, abs=1e-15)
    assert rate(law, 3, 2) == pytest.approx(3 * 0.75)
    assert rate(law, 3, 4) == pytest.approx(3 * 0.25)
    assert rate(law, 3, 3) == 0.0
    assert rate(law, 0, 1) == 0.0


def test_beta_matches_independent_root(law):
    # rho * (p0 + p2 e^rho) = v for the binary law
    ref = float(mpmath.findroot(lambda r: r * (0.75 + 0.25 * mpmath.e**r) - 0.5, 0.4))
    b = beta(law)
    assert b == pytest.approx(ref, abs=1e-11)
    assert b == pytest.approx(0.43939, abs=1e-5)
    assert b * gamma(law, b) == pytest.approx(drift(law), abs=1e-11)


def test_gamma_at_zero_is_p0_plus_second_factorial_part(geo_law):
    p = geo_law.probs
    l = np.arange(1, p.size - 1)
    assert gamma(geo_law, 0.0) == pytest.approx(p[0] + np.sum(p[2:] * l**2))


def test_lyapunov_constant_binary(law):
    assert constants(law).lyapunov_constant == pytest.approx(2 * 0.75 + 0.25)


def test_exp_moment_bound_value(law):
    expected = math.exp(-0.2 * 0.5 * 2 / 2) * math.exp(1.0) + 2 * math.exp(0.2)
    assert exp_moment_bound(law, 0.2, 5, 2.0) == pytest.approx(expected)
    assert exp_moment_bound(law, 0.2, 5, 2.0) == pytest.approx(4.9024, abs=1e-4)


@pytest.mark.parametrize("probs, msg", [
    ([0.5, 0.6], "sum"),
    ([-0.1, 1.1], "nonnegative"),
    ([0.0, 1.0], "p\\(0\\)"),
    ([0.4, 0.0, 0.6], "subcritical"),
    ([], "empty"),
])
def test_invalid_laws_rejected(probs, msg):
    with pytest.raises(LawError, match=msg):
        OffspringLaw(np.array(probs))


def test_trailing_zeros_trimmed():
    law = OffspringLaw(np.array([0.8, 0.2, 0.0, 0.0]))
    assert law.max_offspring == 1
    assert law.cum[-1] == 1.0


def test_geometric_truncated_folds_tail():
    law = geometric_truncated_law(0.5, 3)
    assert law.probs.sum() == pytest.approx(1.0, abs=1e-15)
    assert law.p(3) == pytest.approx(0.5**3 * 0.5 + 0.5**4)


def test_truncate_law_tail_tolerance():
    law = truncate_law(lambda l: 0.6 * 0.4**l, tol=1e-12)
    assert law.probs.sum() == pytest.approx(1.0, abs=1e-14)
    assert 0.4 ** law.max_offspring < 1e-10
    with pytest.raises(LawError, match="tail mass"):
        truncate_law(lambda l: 0.0 if l else 0.5, max_support=10)


def test_law_from_config():
    assert law_from_config({"family": "binary", "p0": 0.8}).p0 == pytest.approx(0.8)
    g = law_from_config({"family": "geometric-truncated", "r": 0.3, "L_off": 4})
    assert g.max_offspring == 4
    assert law_from_config({"probs": [0.7, 0.1, 0.2]}).mean == pytest.approx(0.5)
    with pytest.raises(LawError, match="unknown law family"):
        law_from_config({"family": "poisson"})


def test_generating_function_and_gap(geo_law):
    s = np.linspace(0, 1, 11)
    direct = np.array([sum(p * x**l for l, p in enumerate(geo_law.probs)) for x in s])
    assert np.allclose(generating_function(geo_law, s), direct, atol=1e-15)
    w = np.array([0.3, 0.5, 1.0])
    assert np.allclose(gf_gap(geo_law, w), generating_function(geo_law, 1 - w) - (1 - w),
                       atol=1e-14)


def test_gf_gap_small_argument_precision(law):
    # f(1-w) - (1-w) = v w + p2 w^2 for the binary law
    for w in (1e-6, 1e-10, 1e-14):
        exact = 0.5 * w + 0.25 * w * w
        assert gf_gap(law, w) == pytest.approx(exact, rel=1e-12)


def test_law_summary_keys(law):
    s = law_summary(law)
    assert set(s) == {"v", "q_bar", "beta", "gamma_beta"}
    assert s["q_bar"] == 0.75
    assert binary_law().describe()["probs"] == [0.75, 0.0, 0.25]
