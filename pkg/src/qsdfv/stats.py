"""Estimators and comparison metrics linking simulations to exact references."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import integrate, stats as sps

from .exact import DistributionVector, TruncatedSubGenerator, conditioned_semigroup
from .fv import replicas_moments, replicas_occupation, stationary_run
from .gw_model import OffspringLaw
from .seeding import derive_seed


def _as_mass(a) -> np.ndarray:
    """Mass vector indexed from site 1; dicts map site -> mass."""
    if isinstance(a, DistributionVector):
        return a.mass
    if isinstance(a, Mapping):
        if not a:
            return np.zeros(0)
        if min(a) < 1:
            raise ValueError("sites start at 1")
        out = np.zeros(max(a))
        for x, w in a.items():
            out[x - 1] = w
        return out
    return np.asarray(a, dtype=float).ravel()


def tv_distance(a, b) -> float:
    """Total variation distance ``(1/2) sum_x |a(x) - b(x)|``, shorter vector padded by zero.

    >>> tv_distance([1.0], [0.0, 1.0])
    1.0
    """
    a, b = _as_mass(a), _as_mass(b)
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("measures must be nonnegative")
    n = max(a.size, b.size)
    d = np.zeros(n)
    d[: a.size] += a
    d[: b.size] -= b
    return float(min(1.0, 0.5 * np.abs(d).sum()))


def l2_distance(a, b) -> float:
    a, b = _as_mass(a), _as_mass(b)
    n = max(a.size, b.size)
    d = np.zeros(n)
    d[: a.size] += a
    d[: b.size] -= b
    return float(np.sqrt(np.dot(d, d)))


# --------------------------------------------------------------------------
# batch means


def t_half_width(sample: np.ndarray, level: float = 0.95) -> float:
    """Student-t half width of the mean of an iid ``sample``."""
    n = sample.size
    if n < 2:
        raise ValueError("need at least two values")
    return float(sps.t.ppf(0.5 + level / 2, n - 1) * sample.std(ddof=1) / math.sqrt(n))


def batch_means_ci(values, weights=None, batches: int = 20,
                   level: float = 0.95) -> tuple[float, float]:
    """Batch-means interval for the weighted mean of a correlated series.

    The series is cut into ``batches`` contiguous blocks of (nearly) equal
    length.  The returned mean is the global weighted mean, which equals the
    weight-averaged block means.
    """
    x = np.asarray(values, dtype=float).ravel()
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != x.shape:
        raise ValueError("values and weights differ in length")
    if batches < 2:
        raise ValueError("need at least two batches")
    if x.size < batches:
        raise ValueError(f"series of length {x.size} is shorter than {batches} batches")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive total")
    edges = np.linspace(0, x.size, batches + 1).astype(int)
    bw = np.add.reduceat(w, edges[:-1])
    bs = np.add.reduceat(w * x, edges[:-1])
    if np.any(bw <= 0):
        raise ValueError("a batch carries zero weight")
    means = bs / bw
    return float(bs.sum() / bw.sum()), t_half_width(means, level)


def ci_from_batches(batch_means: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Mean and half width from already-formed equal-weight batch means."""
    b = np.asarray(batch_means, dtype=float)
    return float(b.mean()), t_half_width(b, level)


# --------------------------------------------------------------------------
# fixed-time correlations


@dataclass(frozen=True)
class CorrelationCheck:
    N: int
    t: float
    x: int
    y: int
    estimate: float
    sigma: float
    bound: float
    replicas: int

    @property
    def margin(self) -> float:
        return self.bound - (self.estimate + 3 * self.sigma)

    @property
    def passed(self) -> bool:
        return self.margin >= 0


def correlation_bound(law: OffspringLaw, N: int, t: float) -> float:
    """``2 q_bar exp(2 q_bar t) / N``."""
    return 2 * law.p0 * math.exp(2 * law.p0 * t) / N


def correlation_check(law: OffspringLaw, N: int, t: float, x: int, y: int, replicas: int,
                      seed: int, xi0=None, threads: int = 1, cell: int = 0) -> CorrelationCheck:
    """Cross-replica ``|E[m(x) m(y)] - E m(x) E m(y)|`` at time ``t`` against its bound.

    All replicas start from ``xi0`` (default: every particle at 1).  ``sigma``
    is the standard error of the sample covariance.
    """
    if replicas < 1000:
        raise ValueError("correlation_check needs at least 1000 replicas")
    xi0 = np.ones(N, dtype=np.int64) if xi0 is None else np.asarray(xi0, dtype=np.int64)
    if xi0.size != N:
        raise ValueError("initial configuration has the wrong size")
    K = max(x, y) + 1
    occ = replicas_occupation(law, xi0, t, replicas, seed, cell=cell, K=K, threads=threads)
    a = occ[:, x] / N
    b = occ[:, y] / N
    prod = (a - a.mean()) * (b - b.mean())
    bound = correlation_bound(law, N, t)
    if a.std() == 0 or b.std() == 0:
        return CorrelationCheck(N, t, x, y, 0.0, 0.0, bound, replicas)
    cov = prod.sum() / (replicas - 1)
    sigma = prod.std(ddof=1) / math.sqrt(replicas)
    return CorrelationCheck(N, t, x, y, float(abs(cov)), float(sigma), bound, replicas)


# --------------------------------------------------------------------------
# semigroup gap


@dataclass
class GapResult:
    """``gap[x-1] = E m(x, xi_t) - (m(., xi_0) T_t)(x)`` with standard errors."""

    N: int
    t: float
    gap: np.ndarray
    stderr: np.ndarray
    reference: np.ndarray
    method: str
    replicas: int

    @property
    def max_gap(self) -> float:
        return float(np.abs(self.gap).max()) if self.gap.size else 0.0

    @property
    def argmax(self) -> int:
        return int(np.abs(self.gap).argmax()) + 1

    @property
    def max_stderr(self) -> float:
        return float(self.stderr[self.argmax - 1])


def _evolution_gap(gen: TruncatedSubGenerator, mu0: np.ndarray, N: int, times: np.ndarray,
                   m1: np.ndarray, m2: np.ndarray, t: float) -> np.ndarray:
    """Integrate the mean occupation equation driven by the estimated covariance term.

    For ``u(s, x) = E m(x, xi_s)`` the particle generator gives
    ``du = uQ + q_bar u(1) u + W`` with
    ``W(x) = q_bar [N/(N-1) Cov(m(1), m(x)) + u(1) u(x) / (N-1) - 1{x=1} u(1) / (N-1)]``,
    while the conditioned flow ``v`` solves the same equation with ``W = 0``.
    ``W`` is O(1/N) and is estimated with relative, not absolute, Monte Carlo
    error; the pair ``(v, u - v)`` is then integrated jointly.
    """
    p0 = gen.law.p0
    L = gen.L
    K = m1.shape[1]
    k = min(K, L + 1)
    W = np.zeros((times.size, L))
    u1 = m1[:, 1]
    cov = m2[:, 1, 1:k] - m1[:, 1:2] * m1[:, 1:k]
    W[:, : k - 1] = p0 * (N / (N - 1) * cov + u1[:, None] * m1[:, 1:k] / (N - 1))
    W[:, 0] -= p0 * u1 / (N - 1)
    QT = gen.matrix.T.tocsr()
    kill = gen.kill_rate

    def forcing(s):
        j = int(np.clip(np.searchsorted(times, s, side="right") - 1, 0, times.size - 2))
        h = times[j + 1] - times[j]
        a = 0.0 if h == 0 else (s - times[j]) / h
        return (1 - a) * W[j] + a * W[j + 1]

    def rhs(s, y):
        v, d = y[:L], y[L:]
        u = v + d
        dv = QT @ v + v * float(kill @ v)
        du = QT @ u + u * float(kill @ u)
        return np.concatenate([dv, du - dv + forcing(s)])

    y0 = np.concatenate([mu0, np.zeros(L)])
    sol = integrate.solve_ivp(rhs, (0.0, t), y0, method="DOP853", rtol=1e-10, atol=1e-14)
    if not sol.success:
        raise RuntimeError(f"gap integration failed: {sol.message}")
    return sol.y[L:, -1]


def semigroup_gap(law: OffspringLaw, xi0, t: float, N: int | None = None, replicas: int = 20_000,
                  seed: int = 0, L: int = 64, K: int = 16, grid: int = 21,
                  method: str = "evolution", cell: int = 0, threads: int = 1) -> GapResult:
    """Gap between the mean empirical measure of the particle system at ``t`` and
    the conditioned semigroup applied to the initial empirical measure.

    ``method="direct"`` averages ``m(x, xi_t)`` over replicas.  ``"evolution"``
    estimates the same mean by integrating its exact evolution equation, in
    which only an O(1/N) covariance term is taken from the replicas sampled on
    ``grid`` times in ``[0, t]``; error bars come from a jackknife over seeded
    replica blocks.
    """
    if xi0 is None:
        if N is None:
            raise ValueError("give xi0 or N")
        xi0 = np.ones(N, dtype=np.int64)
    xi0 = np.asarray(xi0, dtype=np.int64)
    N = xi0.size
    if N < 2:
        raise ValueError("need N >= 2")
    if xi0.max() >= min(K, L):
        raise ValueError("initial positions must lie below K and L")
    gen = TruncatedSubGenerator.build(law, L)
    mu0 = np.bincount(xi0 - 1, minlength=L)[:L] / N
    if t == 0:
        z = np.zeros(L)
        return GapResult(N, 0.0, z, z.copy(), mu0, method, 0)
    ref = conditioned_semigroup(gen, DistributionVector(mu0), t).dist.mass
    if method == "direct":
        occ = replicas_occupation(law, xi0, t, replicas, seed, cell=cell, K=K, threads=threads)
        m = occ[:, 1:] / N
        gap = np.zeros(L)
        se = np.zeros(L)
        gap[: K - 1] = m.mean(axis=0) - ref[: K - 1]
        gap[K - 1:] = -ref[K - 1:]
        se[: K - 1] = m.std(axis=0, ddof=1) / math.sqrt(replicas)
        return GapResult(N, t, gap, se, ref, method, replicas)
    if method != "evolution":
        raise ValueError(f"unknown method {method!r}")
    times = np.linspace(0.0, t, grid)
    mom = replicas_moments(law, xi0, times, replicas, seed, cell=cell, K=K, threads=threads)
    gap = _evolution_gap(gen, mu0, N, times, *mom.pooled(), t)
    nb = mom.counts.size
    if nb >= 2:
        jk = np.array([_evolution_gap(gen, mu0, N, times, *mom.pooled(np.delete(np.arange(nb), b)), t)
                       for b in range(nb)])
        se = np.sqrt((nb - 1) / nb * ((jk - jk.mean(axis=0)) ** 2).sum(axis=0))
    else:
        se = np.full(L, np.nan)
    return GapResult(N, t, gap, se, ref, method, mom.replicas)


# --------------------------------------------------------------------------
# N sweeps


def trend_slope(Ns: Sequence[float], values: Sequence[float],
                stderrs: Sequence[float]) -> tuple[float, float]:
    """Weighted least-squares slope of ``values`` against ``log N`` and its standard error."""
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.asarray(values, dtype=float)
    s = np.asarray(stderrs, dtype=float)
    if np.any(s <= 0):
        raise ValueError("standard errors must be positive")
    w = 1.0 / s**2
    xm = np.sum(w * x) / w.sum()
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * y) / sxx
    return float(slope), float(1.0 / math.sqrt(sxx))


def increasing_trend(Ns, values, stderrs, level: float = 0.95) -> bool:
    """One-sided test of a positive slope in ``log N``."""
    slope, se = trend_slope(Ns, values, stderrs)
    return slope > sps.norm.ppf(level) * se


def strictly_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values[:-1], values[1:]))


@dataclass
class SweepRow:
    N: int
    runs: int
    tv: float
    tv_se: float
    m1: float
    m1_se: float
    chaos_dev: float
    chaos_se: float
    psi: float
    psi_hw: float
    R: float
    R_hw: float
    exp_moment_over_N: float
    exp_moment_se: float
    events: int


@dataclass
class SweepResult:
    """Per-N pooled stationary statistics from matched seed lists."""

    rows: list[SweepRow]
    seeds: list[int]
    horizon: float
    burn_in: float
    rho: float
    m_bar: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    COLUMNS = tuple(SweepRow.__dataclass_fields__)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def row(self, N: int) -> SweepRow:
        for r in self.rows:
            if r.N == N:
                return r
        raise KeyError(N)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in self.COLUMNS])

    def to_json(self) -> dict:
        return {"horizon": self.horizon, "burn_in": self.burn_in, "rho": self.rho,
                "seeds": self.seeds, "rows": [asdict(r) for r in self.rows]}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jackknife_se(stat, samples: np.ndarray) -> float:
    n = samples.shape[0]
    if n < 2:
        return math.nan
    idx = np.arange(n)
    jk = np.array([stat(samples[idx != k]) for k in range(n)])
    return float(math.sqrt((n - 1) / n * ((jk - jk.mean()) ** 2).sum()))


def stationary_sweep(law: OffspringLaw, Ns: Sequence[int], horizon: float, burn_in: float,
                     runs: int, seed: int, rho: float, reference: np.ndarray,
                     threads: int = 1) -> SweepResult:
    """Independent stationary runs for every ``N``; run ``r`` uses the same seed at each ``N``.

    ``reference`` is the target measure indexed from site 1.  Statistics are
    pooled across runs; standard errors are across runs (jackknife for TV).
    """
    seeds = [derive_seed(seed, r) for r in range(runs)]
    rows, mbars = [], {}
    for N in Ns:
        job = lambda s: stationary_run(law, N, horizon, s, burn_in=burn_in, rho=rho)
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                res = list(ex.map(job, seeds))
        else:
            res = [job(s) for s in seeds]
        L = max(reference.size, max(r.m_bar().size for r in res))
        ms = np.zeros((runs, L))
        for k, r in enumerate(res):
            mb = r.m_bar()
            ms[k, : mb.size] = mb
        ref = np.zeros(L)
        ref[: reference.size] = reference
        tv_of = lambda s: 0.5 * np.abs(s.mean(axis=0) - ref).sum()
        pair = np.array([r.pair_mean(1, 2) for r in res]) - ref[0] * ref[1]
        psi = np.array([r.mean("psi") for r in res])
        R = np.array([r.mean("R") for r in res])
        ex = np.array([r.mean("exp_rho_R") for r in res]) / N
        rows.append(SweepRow(
            N=int(N), runs=runs, tv=float(tv_of(ms)), tv_se=_jackknife_se(tv_of, ms),
            m1=float(ms[:, 0].mean()), m1_se=float(ms[:, 0].std(ddof=1) / math.sqrt(runs)),
            chaos_dev=float(abs(pair.mean())), chaos_se=float(pair.std(ddof=1) / math.sqrt(runs)),
            psi=float(psi.mean()), psi_hw=t_half_width(psi), R=float(R.mean()),
            R_hw=t_half_width(R), exp_moment_over_N=float(ex.mean()),
            exp_moment_se=float(ex.std(ddof=1) / math.sqrt(runs)),
            events=int(sum(r.events for r in res))))
        mbars[int(N)] = ms.mean(axis=0)
    return SweepResult(rows, seeds, float(horizon), float(burn_in), float(rho), mbars)


def json_dump(obj, path: str | Path) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n")
