"""Deterministic reference numerics on the truncated state space ``{1..L}``.

Two independent routes to the conditioned law ``mu T_t`` are provided:

* the linear forward equation on ``{1..L}`` (killed and leaked mass tracked in
  two sink states), integrated with fixed-step RK4 and normalized afterwards;
* the generating-function route, where ``g(z) = 1 - E_1 z^{Z_t}`` solves a
  scalar ODE and ``G(mu T_t; z)`` is assembled from ``g(z)`` and ``g(0)``.

The minimal QSD is obtained by Yaglom iteration from ``delta_1``; the closed
form of its generating function and an inverse-iteration eigenvector on the
truncated matrix serve as cross-checks.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import integrate, linalg, sparse

from .gw_model import OffspringLaw, drift, gf_gap

MASS_ATOL = 1e-10


class UnderflowError(ArithmeticError):
    """Surviving mass too small to normalize reliably."""


class ConvergenceError(RuntimeError):
    pass


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DistributionVector:
    """Probability vector on ``{1..L}``; ``mass[x - 1]`` is the mass at ``x``."""

    mass: np.ndarray

    def __post_init__(self):
        m = np.array(self.mass, dtype=float).ravel()
        if m.size == 0:
            raise ValueError("empty distribution")
        if np.any(m < 0):
            raise ValueError("negative mass")
        if abs(m.sum() - 1.0) > MASS_ATOL:
            raise ValueError(f"masses sum to {m.sum()!r}")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @property
    def L(self) -> int:
        return self.mass.size

    @property
    def support(self) -> np.ndarray:
        return np.arange(1, self.mass.size + 1)

    def __getitem__(self, x: int) -> float:
        """Mass at site ``x`` (1-based, zero off the stored range)."""
        return float(self.mass[x - 1]) if 1 <= x <= self.mass.size else 0.0

    def moment(self, k: int) -> float:
        return float(np.dot(self.support.astype(float) ** k, self.mass))

    def padded(self, L: int) -> np.ndarray:
        if L < self.L and self.mass[L:].any():
            raise ValueError(f"distribution has mass beyond {L}")
        out = np.zeros(L)
        n = min(L, self.L)
        out[:n] = self.mass[:n]
        return out

    @classmethod
    def point_mass(cls, x: int, L: int) -> "DistributionVector":
        m = np.zeros(L)
        m[x - 1] = 1.0
        return cls(m)

    @classmethod
    def normalized(cls, weights) -> "DistributionVector":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())


def as_distribution(mu) -> DistributionVector:
    return mu if isinstance(mu, DistributionVector) else DistributionVector(mu)


@dataclass
class TruncatedSubGenerator:
    """Generator of the driving process restricted to ``{1..L}``.

    ``matrix`` holds the off-diagonal rates between transient states and the
    total exit rate on the diagonal; ``kill_rate`` and ``lost_rate`` are the
    rates into 0 and past ``L``.
    """

    law: OffspringLaw
    L: int
    matrix: sparse.csr_matrix = field(repr=False)
    kill_rate: np.ndarray = field(repr=False)
    lost_rate: np.ndarray = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, law: OffspringLaw, L: int) -> "TruncatedSubGenerator":
        if L < 1:
            raise ValueError("truncation level must be >= 1")
        rows, cols, vals = [], [], []
        kill = np.zeros(L)
        lost = np.zeros(L)
        out_rate = 1.0 - law.p(1)
        for x in range(1, L + 1):
            for l, pl in enumerate(law.probs):
                if l == 1 or pl == 0:
                    continue
                y = x + l - 1
                r = x * pl
                if y == 0:
                    kill[x - 1] += r
                elif y > L:
                    lost[x - 1] += r
                else:
                    rows.append(x - 1)
                    cols.append(y - 1)
                    vals.append(r)
            rows.append(x - 1)
            cols.append(x - 1)
            vals.append(-x * out_rate)
        Q = sparse.csr_matrix((vals, (rows, cols)), shape=(L, L))
        return cls(law, L, Q, kill, lost)

    @property
    def max_exit_rate(self) -> float:
        return self.L * (1.0 - self.law.p(1))

    def rows(self):
        """Yield ``(x, [(y, rate), ...], kill_rate, lost_rate)`` for ``x = 1..L``."""
        Q = self.matrix
        for i in range(self.L):
            lo, hi = Q.indptr[i], Q.indptr[i + 1]
            entries = [(int(j) + 1, float(r)) for j, r in zip(Q.indices[lo:hi], Q.data[lo:hi])
                       if j != i]
            yield i + 1, entries, float(self.kill_rate[i]), float(self.lost_rate[i])

    def augmented(self) -> np.ndarray:
        """Dense generator on ``{1..L} + {killed, lost}`` (sinks absorbing)."""
        L = self.L
        A = np.zeros((L + 2, L + 2))
        A[:L, :L] = self.matrix.toarray()
        A[:L, L] = self.kill_rate
        A[:L, L + 1] = self.lost_rate
        return A

    def default_dt(self) -> float:
        return 0.1 / self.max_exit_rate

    def propagator(self, t: float, dt: float | None = None) -> np.ndarray:
        """Row-vector propagator of ``n`` RK4 steps of size ``t / n`` (``t / n <= dt``).

        For the linear system the RK4 step is the matrix polynomial
        ``I + hA + (hA)^2/2 + (hA)^3/6 + (hA)^4/24``; n steps are its n-th power.
        """
        bound = self.default_dt()
        dt = bound if dt is None else dt
        if dt > bound * (1 + 1e-12):
            raise ValueError(f"dt={dt:g} exceeds the stability bound {bound:g}")
        n = max(1, math.ceil(t / dt - 1e-9))
        key = (float(t), n)
        P = self._cache.get(key)
        if P is None:
            hA = (t / n) * self.augmented()
            step = np.eye(self.L + 2)
            term = np.eye(self.L + 2)
            for k in range(1, 5):
                term = term @ hA / k
                step = step + term
            P = np.linalg.matrix_power(step, n)
            self._cache[key] = P
        return P


@dataclass(frozen=True)
class SemigroupResult:
    dist: DistributionVector
    surviving_mass: float
    leak: float
    """Unconditional mass lost past ``L`` during ``[0, t]``."""

    @property
    def relative_leak(self) -> float:
        return self.leak / self.surviving_mass


def conditioned_semigroup(gen: TruncatedSubGenerator, mu, t: float, dt: float | None = None,
                          chunk: float = 1.0, min_survival: float = 1e-12) -> SemigroupResult:
    """``mu T_t`` by integrating ``u' = u Q`` on ``{1..L}`` and normalizing.

    The horizon is split into chunks of length ``<= chunk``; the state is
    renormalized after each chunk so long horizons do not underflow, while
    the true surviving mass is still reported.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    mu = as_distribution(mu)
    u = mu.padded(gen.L)
    if t == 0:
        return SemigroupResult(mu, 1.0, 0.0)
    L = gen.L
    n_chunks = max(1, math.ceil(t / chunk - 1e-9))
    h = t / n_chunks
    P = gen.propagator(h, dt)
    log_surv = 0.0
    leak = 0.0
    state = np.zeros(L + 2)
    for _ in range(n_chunks):
        state[:L] = u
        state[L:] = 0.0
        state = state @ P
        s = state[:L].sum()
        if s <= 0:
            raise UnderflowError("no surviving mass")
        leak += math.exp(log_surv) * state[L + 1]
        log_surv += math.log(s)
        u = np.clip(state[:L], 0.0, None) / s
    surv = math.exp(log_surv)
    if surv < min_survival:
        raise UnderflowError(f"surviving mass {surv:.3g} below {min_survival:g}; "
                             "increase L or reduce t")
    if leak > 1e-6 * surv:
        warnings.warn(f"truncation leak {leak:.3g} exceeds 1e-6 of surviving mass {surv:.3g}",
                      TruncationWarning, stacklevel=2)
    return SemigroupResult(DistributionVector(u / u.sum()), surv, leak)


def conditioned_flow(gen: TruncatedSubGenerator, mu, times: Sequence[float],
                     dt: float | None = None) -> list[DistributionVector]:
    """``mu T_t`` at each of the increasing ``times`` (shares propagators)."""
    out = []
    cur = as_distribution(mu)
    prev = 0.0
    for t in times:
        if t < prev:
            raise ValueError("times must be nondecreasing")
        if t > prev:
            cur = conditioned_semigroup(gen, cur, t - prev, dt, min_survival=0.0).dist
        out.append(cur)
        prev = t
    return out


def conditioned_drift(gen: TruncatedSubGenerator, mu) -> np.ndarray:
    """Right-hand side of the nonlinear conditioned forward equation at ``mu``.

    ``d/dt v(x) = (vQ)(x) + v(x) * (killing flux of v)``; with killing only
    from state 1 the flux is ``p(0) v(1)``.
    """
    v = as_distribution(mu).padded(gen.L)
    return gen.matrix.T @ v + v * float(np.dot(gen.kill_rate, v))


def tv(a: np.ndarray, b: np.ndarray) -> float:
    n = max(a.size, b.size)
    aa = np.zeros(n)
    bb = np.zeros(n)
    aa[: a.size] = a
    bb[: b.size] = b
    return 0.5 * float(np.abs(aa - bb).sum())


@dataclass(frozen=True)
class QSDResult:
    dist: DistributionVector
    theta: float
    iterations: int


def yaglom_qsd(gen: TruncatedSubGenerator, tol: float = 1e-10, max_iters: int = 10_000,
               horizon: float = 1.0, dt: float | None = None) -> QSDResult:
    """Minimal QSD as the limit of ``delta_1 T_{k h}``, stopping when successive
    iterates are within ``tol`` in total variation.

    ``theta`` is the killing flux under the limit, i.e. its extinction rate.
    """
    P = gen.propagator(horizon, dt)
    L = gen.L
    u = np.zeros(L)
    u[0] = 1.0
    state = np.zeros(L + 2)
    for it in range(1, max_iters + 1):
        state[:L] = u
        state[L:] = 0.0
        state = state @ P
        new = np.clip(state[:L], 0.0, None)
        new /= new.sum()
        if tv(new, u) < tol:
            theta = float(np.dot(gen.kill_rate, new))
            return QSDResult(DistributionVector(new), theta, it)
        u = new
    raise ConvergenceError(f"Yaglom iteration did not reach tol={tol:g} in {max_iters} steps")


def eigen_qsd(gen: TruncatedSubGenerator, tol: float = 1e-14, max_iters: int = 10_000) -> QSDResult:
    """Left Perron eigenvector of the truncated sub-generator by inverse iteration.

    ``(-Q)^{-1}`` is entrywise nonnegative and its dominant eigenvalue is
    ``1/theta`` for the slowest killing rate ``theta``; iterating
    ``u <- u (-Q)^{-1}`` from a positive vector converges to the QSD of the
    truncated chain.
    """
    A = -gen.matrix.toarray()
    lu = linalg.lu_factor(A)
    u = np.full(gen.L, 1.0 / gen.L)
    for it in range(1, max_iters + 1):
        w = linalg.lu_solve(lu, u, trans=1)
        w = np.clip(w, 0.0, None)
        w /= w.sum()
        if np.abs(w - u).max() < tol:
            u = w
            break
        u = w
    else:
        raise ConvergenceError("inverse iteration did not converge")
    theta = float(np.dot(u, A @ np.ones(gen.L)) )  # row sums of -Q = exit to sinks
    theta_kill = float(np.dot(gen.kill_rate, u))
    return QSDResult(DistributionVector(u), theta_kill if theta_kill > 0 else theta, it)


def _survival_gf(law: OffspringLaw, z, t: float) -> np.ndarray:
    """``g(t, z) = 1 - E_1[z^{Z_t}]``, solving ``g' = -(f(1-g) - (1-g))``, ``g(0) = 1 - z``.

    Integrating ``g`` rather than ``F = 1 - g`` keeps full relative precision
    when the survival probability is tiny.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any((z < 0) | (z > 1)):
        raise ValueError("z must lie in [0, 1]")
    if t < 0:
        raise ValueError("t must be nonnegative")
    g0 = 1.0 - z
    if t == 0:
        return g0
    sol = integrate.solve_ivp(lambda _, g: -gf_gap(law, g), (0.0, t), g0, method="DOP853",
                              rtol=1e-13, atol=1e-300)
    if not sol.success:
        raise ConvergenceError(sol.message)
    return np.clip(sol.y[:, -1], 0.0, 1.0)


def gf_branching(law: OffspringLaw, z, t: float):
    """``F(t, z) = E_1[z^{Z_t}]`` for the unconditioned process started from one individual."""
    g = _survival_gf(law, z, t)
    F = 1.0 - g
    return F if np.ndim(z) else float(F[0])


def gf_conditioned(law: OffspringLaw, mu, t: float, z):
    """``G(mu T_t; z)`` assembled from ``g(z)`` and ``g(0)`` of the one-individual process."""
    mu = as_distribution(mu)
    zz = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any((zz < 0) | (zz >= 1)):
        raise ValueError("z must lie in [0, 1)")
    ell = mu.support.astype(float)
    if t == 0:
        out = np.array([float(np.dot(mu.mass, zi**ell)) for zi in zz])
        return out if np.ndim(z) else float(out[0])
    g = _survival_gf(law, np.concatenate([[0.0], zz]), t)
    g0, gz = g[0], g[1:]
    # (1-g)^l - 1 computed as expm1(l log1p(-g)) to keep small-g precision
    a0 = -np.expm1(ell * np.log1p(-g0)) if g0 < 1 else np.ones_like(ell)
    den = float(np.dot(mu.mass, a0))
    if den < 1e-300:
        raise UnderflowError("conditioning denominator underflows")
    out = np.empty(zz.size)
    for k, gk in enumerate(gz):
        az = -np.expm1(ell * np.log1p(-gk)) if gk < 1 else np.ones_like(ell)
        out[k] = float(np.dot(mu.mass, a0 - az)) / den
    return out if np.ndim(z) else float(out[0])


def gf_minimal_qsd(law: OffspringLaw, z):
    """Closed-form generating function of the minimal QSD,
    ``1 - exp(-v int_0^z du / (f(u) - u))``.

    The integrand behaves like ``1/(v (1-u))`` near 1; that part is
    integrated analytically, giving ``1 - (1-z) exp(-v J(z))`` with a regular
    remainder ``J``.
    """
    v = drift(law)
    zz = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any((zz < 0) | (zz >= 1)):
        raise ValueError("z must lie in [0, 1)")

    def regular(u):
        w = 1.0 - u
        h = float(gf_gap(law, w))
        if w < 1e-6:
            # series: 1/h - 1/(v w) -> -h''(0)/(2 v^2) as w -> 0
            l = np.arange(law.probs.size)
            h2 = float(np.dot(law.probs, l * (l - 1)))
            return -h2 / (2 * v * v)
        return 1.0 / h - 1.0 / (v * w)

    out = np.empty(zz.size)
    for k, zk in enumerate(zz):
        J, _ = integrate.quad(regular, 0.0, zk, epsabs=1e-13, epsrel=1e-12, limit=200)
        out[k] = 1.0 - (1.0 - zk) * math.exp(-v * J)
    return out if np.ndim(z) else float(out[0])


def gf_of(mu, z):
    """``G(mu; z) = sum_x mu(x) z^x``."""
    mu = as_distribution(mu)
    zz = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.array([float(np.dot(mu.mass, zi ** mu.support)) for zi in zz])
    return out if np.ndim(z) else float(out[0])


def moment_ratio(mu) -> float:
    mu = as_distribution(mu)
    return mu.moment(2) / mu.moment(1)


def classify_K_alpha(mu, alpha: float) -> bool:
    """Membership in ``K(alpha) = {mu : sum x^2 mu / sum x mu <= alpha}``."""
    return moment_ratio(mu) <= alpha


def stress_set_k_alpha(alpha: float, L: int) -> list[DistributionVector]:
    """Twenty initial laws in ``K(alpha)``: point masses, extremal two-point
    mixtures and truncated geometrics (built for ``alpha = 10``)."""
    out = []
    for x in range(1, 11):
        if x <= alpha:
            out.append(DistributionVector.point_mass(x, L))
    for far in (15, 20, 30, 50, 100):
        # largest weight on `far` keeping the ratio <= alpha for a mixture with delta_1
        w = 0.999 * (alpha - 1) / ((far - 1) * (far - alpha + 1))
        m = np.zeros(L)
        m[0] = 1 - w
        m[far - 1] = w
        out.append(DistributionVector(m))
    for r in (0.2, 0.4, 0.6, 0.75, 0.8):
        w = r ** np.arange(min(L, 50))
        out.append(DistributionVector.normalized(np.pad(w, (0, L - w.size))))
    for mu in out:
        if not classify_K_alpha(mu, alpha):
            raise AssertionError("stress set member outside K(alpha)")
    return out


def write_distribution_csv(path: str | Path, dist, meta: Mapping | None = None,
                           columns: Iterable[str] = ("x", "mass")) -> Path:
    """CSV with ``#``-prefixed metadata lines followed by ``x,mass`` rows."""
    dist = as_distribution(dist)
    path = Path(path)
    with path.open("w", newline="") as fh:
        for k, val in (meta or {}).items():
            fh.write(f"# {k}: {val}\n")
        w = csv.writer(fh)
        w.writerow(list(columns))
        for x, m in zip(dist.support, dist.mass):
            w.writerow([int(x), repr(float(m))])
    return path


def read_distribution_csv(path: str | Path) -> DistributionVector:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    data = list(csv.reader(rows))[1:]
    L = max(int(r[0]) for r in data)
    m = np.zeros(L)
    for r in data:
        m[int(r[0]) - 1] = float(r[1])
    return DistributionVector(m)
