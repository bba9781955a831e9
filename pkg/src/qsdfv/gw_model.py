"""Subcritical continuous-time Galton-Watson driving process.

Each individual lives an Exp(1) lifetime and is replaced by ``l`` children
with probability ``p[l]``.  Seen from the population size, state ``x`` jumps
to ``x + l - 1`` at rate ``x * p[l]``; state 0 is absorbing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import optimize

PROB_ATOL = 1e-12
BETA_XTOL = 1e-12


class LawError(ValueError):
    """Raised when an offspring law violates the model assumptions."""


@dataclass(frozen=True)
class OffspringLaw:
    """Finite-support offspring distribution ``probs[l] = P(l children)``.

    Validated on construction: nonnegative, sums to one, ``p(0) > 0`` and
    mean offspring strictly below one.
    """

    probs: np.ndarray
    name: str = "custom"
    cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).ravel()
        if p.size == 0:
            raise LawError("empty offspring law")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise LawError("offspring probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > PROB_ATOL:
            raise LawError(f"offspring probabilities sum to {p.sum()!r}, not 1")
        if p[0] <= 0:
            raise LawError("p(0) must be positive, otherwise absorption never happens")
        # trailing zeros carry no information
        nz = np.flatnonzero(p)
        p = p[: nz[-1] + 1]
        mean = float(np.dot(np.arange(p.size), p))
        if mean >= 1.0:
            raise LawError(f"law is not subcritical (mean offspring {mean:.6g} >= 1)")
        p.setflags(write=False)
        cum = np.cumsum(p)
        cum[-1] = 1.0
        cum.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "cum", cum)

    @property
    def max_offspring(self) -> int:
        return self.probs.size - 1

    @property
    def p0(self) -> float:
        return float(self.probs[0])

    def p(self, l: int) -> float:
        if 0 <= l < self.probs.size:
            return float(self.probs[l])
        return 0.0

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(self.probs.size), self.probs))

    def describe(self) -> dict:
        return {"name": self.name, "probs": [float(x) for x in self.probs]}


def binary_law(p0: float = 0.75) -> OffspringLaw:
    """Either no child (``p0``) or two children (``1 - p0``); subcritical iff p0 > 1/2."""
    return OffspringLaw(np.array([p0, 0.0, 1.0 - p0]), name=f"binary(p0={p0:g})")


def geometric_truncated_law(r: float, max_offspring: int) -> OffspringLaw:
    """Geometric weights ``(1-r) r^l`` on ``0..max_offspring``, tail folded into the top atom."""
    if not 0 < r < 1:
        raise LawError("geometric ratio r must lie in (0, 1)")
    if max_offspring < 1:
        raise LawError("max_offspring must be >= 1")
    l = np.arange(max_offspring + 1)
    p = (1.0 - r) * r**l
    p[-1] += r ** (max_offspring + 1)
    return OffspringLaw(p, name=f"geometric-truncated(r={r:g}, L_off={max_offspring})")


def truncate_law(pmf: Callable[[int], float], tol: float = 1e-12,
                 max_support: int = 100_000, name: str = "truncated") -> OffspringLaw:
    """Finite law from an infinite pmf: stop once the remaining tail mass is below
    ``tol`` and fold that tail into the top atom."""
    probs = []
    total = 0.0
    for l in range(max_support):
        probs.append(float(pmf(l)))
        total += probs[-1]
        if 1.0 - total < tol:
            break
    else:
        raise LawError(f"tail mass still {1.0 - total:.3g} after {max_support} atoms")
    probs[-1] += 1.0 - total
    return OffspringLaw(np.array(probs), name=name)


def law_from_config(cfg: Mapping) -> OffspringLaw:
    """Build a law from ``{"probs": [...]}`` or ``{"family": ..., <params>}``."""
    if "probs" in cfg:
        return OffspringLaw(np.asarray(cfg["probs"], dtype=float))
    family = cfg.get("family")
    if family == "binary":
        return binary_law(float(cfg.get("p0", 0.75)))
    if family == "geometric-truncated":
        return geometric_truncated_law(float(cfg["r"]), int(cfg["L_off"]))
    raise LawError(f"unknown law family {family!r}; expected 'binary' or 'geometric-truncated'")


def drift(law: OffspringLaw) -> float:
    """Rate ``v`` such that the mean displacement at state ``x`` is ``-v x``."""
    l = np.arange(law.probs.size) - 1
    return -float(np.dot(l, law.probs))


def rate(law: OffspringLaw, x: int, y: int) -> float:
    """Jump rate of the population size from ``x`` to ``y``."""
    if x >= 1 and y == x - 1:
        return x * law.p0
    if y > x >= 1:
        return x * law.p(y - x + 1)
    return 0.0


def gamma(law: OffspringLaw, rho: float) -> float:
    """``p(0) + sum_{l>=1} p(l+1) l^2 exp(rho l)``."""
    l = np.arange(1, law.probs.size - 1)
    return law.p0 + float(np.sum(law.probs[2:] * l**2 * np.exp(rho * l)))


def beta(law: OffspringLaw) -> float:
    """Positive root of ``rho * gamma(rho) = v``."""
    v = drift(law)
    h = lambda r: r * gamma(law, r) - v
    hi = v / law.p0  # gamma >= p0, so h(hi) >= 0
    return optimize.bisect(h, 0.0, hi, xtol=BETA_XTOL, rtol=4 * np.finfo(float).eps,
                           maxiter=500)


def generating_function(law: OffspringLaw, s):
    """``f(s) = sum_l p(l) s^l``."""
    return np.polynomial.polynomial.polyval(s, law.probs)


def gf_gap(law: OffspringLaw, w):
    """``f(1 - w) - (1 - w)``, evaluated without cancellation for small ``w``."""
    w = np.asarray(w, dtype=float)
    l = np.arange(law.probs.size)
    with np.errstate(invalid="ignore", divide="ignore"):
        lg = np.log1p(-np.minimum(w, 1.0))[..., None]
        terms = np.where(l == 0, 0.0, np.expm1(l * lg))
    return np.sum(law.probs * terms, axis=-1) + w


@dataclass(frozen=True)
class GWConstants:
    v: float
    q_bar: float
    beta: float
    law: OffspringLaw = field(repr=False)

    def gamma_of_rho(self, rho: float) -> float:
        return gamma(self.law, rho)

    def f(self, s):
        return generating_function(self.law, s)

    @property
    def lyapunov_constant(self) -> float:
        """``2 p(0) + sum_{i>=1} p(i+1) i^2``, the additive constant in the psi drift bound."""
        i = np.arange(1, self.law.probs.size - 1)
        return 2 * self.law.p0 + float(np.sum(self.law.probs[2:] * i**2))


def constants(law: OffspringLaw) -> GWConstants:
    return GWConstants(v=drift(law), q_bar=law.p0, beta=beta(law), law=law)


def exp_moment_bound(law: OffspringLaw, rho: float, x: int, t: float) -> float:
    """Upper bound on ``E exp(rho Z~_t^x)`` for the reflected process, valid for rho < beta."""
    v = drift(law)
    return math.exp(-rho * v * t / 2) * math.exp(rho * x) + t * math.exp(rho)


def law_summary(law: OffspringLaw) -> Mapping[str, float]:
    c = constants(law)
    return {"v": c.v, "q_bar": c.q_bar, "beta": c.beta, "gamma_beta": gamma(law, c.beta)}
