"""Multitype branching process dominating the Fleming-Viot system, its Harris
coupling with the particles, and the reflected Galton-Watson process.

Individuals carry a type ``i`` in ``0..N-1`` and a position ``x >= 1``.  Each
individual moves like the driving process with the jump to 0 suppressed.  For
every ordered pair ``(i, j)``, ``i != j``, at rate ``q_bar / (N - 1)`` every
``j``-individual spawns an ``i``-individual at its own position, where
``q_bar = p(0)``.  In coupled mode particle ``i`` rides one of its
``i``-individuals; the branching event of the pair ``(i, j)`` also carries
particle ``i`` to particle ``j`` whenever particle ``i`` sits at 1.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .fenwick import WeightedIndex
from .gw_model import OffspringLaw, drift
from .seeding import BLOCK, block_seeds, derive_seed, generator

POPULATION_CAP = 10**6


class PopulationCapError(RuntimeError):
    """The population outgrew the cap; ``partial`` holds the run up to that point."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


class InvariantViolation(AssertionError):
    pass


class MultitypeState:
    """Finite population of typed individuals with a proportional-to-position index.

    >>> s = MultitypeState.from_particles([1, 3])
    >>> s.size, s.rightmost, s.count(1, 3)
    (2, 3, 1)
    """

    def __init__(self, n_types: int, types=(), positions=()):
        if n_types < 1:
            raise ValueError("need at least one type")
        types = np.asarray(types, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        if types.shape != positions.shape:
            raise ValueError("types and positions differ in length")
        if np.any(positions < 1):
            raise ValueError("positions must be >= 1")
        if np.any((types < 0) | (types >= n_types)):
            raise ValueError("type out of range")
        self.n_types = int(n_types)
        self.types: list[int] = [int(t) for t in types]
        self.index = WeightedIndex(positions, capacity=max(16, 2 * positions.size))
        self.counts: Counter = Counter(zip(self.types, (int(x) for x in positions)))
        self.at_site: Counter = Counter(int(x) for x in positions)
        self.members: list[list[int]] = [[] for _ in range(n_types)]
        for k, t in enumerate(self.types):
            self.members[t].append(k)
        self._right = int(positions.max()) if positions.size else 0

    @classmethod
    def from_particles(cls, xi) -> "MultitypeState":
        """One individual of type ``i`` at ``xi[i]`` for each particle."""
        xi = np.asarray(xi, dtype=np.int64)
        return cls(xi.size, np.arange(xi.size), xi)

    @property
    def size(self) -> int:
        return len(self.types)

    @property
    def rightmost(self) -> int:
        return self._right

    def position(self, k: int) -> int:
        return self.index[k]

    def positions(self) -> np.ndarray:
        return self.index.weights()

    def count(self, i: int, x: int) -> int:
        return self.counts.get((i, x), 0)

    def type_sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])

    def add(self, i: int, x: int) -> int:
        k = self.index.append(x)
        self.types.append(i)
        self.members[i].append(k)
        self.counts[(i, x)] += 1
        self.at_site[x] += 1
        self._right = max(self._right, x)
        return k

    def move(self, k: int, y: int) -> None:
        x = self.index[k]
        if x == y:
            return
        i = self.types[k]
        self.index[k] = y
        self.counts[(i, x)] -= 1
        if not self.counts[(i, x)]:
            del self.counts[(i, x)]
        self.counts[(i, y)] += 1
        self.at_site[x] -= 1
        if not self.at_site[x]:
            del self.at_site[x]
        self.at_site[y] += 1
        if y > self._right:
            self._right = y
        elif x == self._right and x not in self.at_site:
            r = x - 1
            while r > 0 and r not in self.at_site:
                r -= 1
            self._right = r

    def copy(self) -> "MultitypeState":
        return MultitypeState(self.n_types, self.types, self.positions())

    def check(self) -> None:
        pos = self.positions()
        if len(pos) != self.size or sum(self.counts.values()) != self.size:
            raise InvariantViolation("population bookkeeping out of sync")
        if self.size and self._right != pos.max():
            raise InvariantViolation("rightmost position out of sync")


# --------------------------------------------------------------------------
# shared event mechanics


def _spatial_target(law: OffspringLaw, x: int, u: float) -> int:
    """Reflection-free move of one individual: offspring draw ``l``, no jump to 0."""
    l = int(np.searchsorted(law.cum, u, side="right"))
    if l == 0:
        return x - 1 if x >= 2 else x
    return x + l - 1


def _branch(state: MultitypeState, i: int, j: int) -> dict[int, int]:
    """Every ``j``-individual spawns an ``i``-individual; returns parent -> newborn."""
    born = {}
    for k in list(state.members[j]):
        born[k] = state.add(i, state.position(k))
    return born


@dataclass
class BranchingRun:
    times: np.ndarray
    sizes: np.ndarray
    rightmost: np.ndarray
    final: MultitypeState
    events: int
    complete: bool = True


def simulate_branching(law: OffspringLaw, zeta0: MultitypeState, horizon: float, seed: int,
                       sample_times: Sequence[float] | None = None,
                       cap: int = POPULATION_CAP) -> BranchingRun:
    """Run the multitype branching process from a copy of ``zeta0`` up to ``horizon``.

    ``sizes[k]`` and ``rightmost[k]`` are the population size and rightmost
    position at ``sample_times[k]`` (default: just the horizon).
    """
    if zeta0.size < 1:
        raise ValueError("empty initial population")
    times = np.array([horizon] if sample_times is None else sample_times, dtype=float)
    rng = generator(seed, 0)
    state = zeta0.copy()
    N = state.n_types
    b_rate = N * law.p0 if N >= 2 else 0.0
    sizes = np.zeros(times.size, dtype=np.int64)
    right = np.zeros(times.size, dtype=np.int64)
    t, k, events = 0.0, 0, 0
    while k < times.size:
        total = state.index.total + b_rate
        t_next = t + rng.exponential(1.0 / total)
        while k < times.size and times[k] < t_next:
            sizes[k], right[k] = state.size, state.rightmost
            k += 1
        if k == times.size:
            break
        t = t_next
        events += 1
        if rng.random() * total < b_rate:
            j = int(rng.integers(N))
            i = int(rng.integers(N - 1))
            i += i >= j
            _branch(state, i, j)
            if state.size > cap:
                partial = BranchingRun(times[:k], sizes[:k], right[:k], state, events, False)
                raise PopulationCapError(f"population {state.size} exceeds cap {cap} at t={t:.4g}",
                                         partial)
        else:
            m = state.index.sample(rng)
            state.move(m, _spatial_target(law, state.position(m), rng.random()))
    return BranchingRun(times, sizes, right, state, events)


# --------------------------------------------------------------------------
# Harris coupling with the particle system


@dataclass
class CoupledRun:
    xi: np.ndarray
    zeta: MultitypeState
    attach: np.ndarray
    events: int
    checks: int
    violations_attachment: int
    violations_domination: int
    max_ratio: float = field(default=0.0)

    @property
    def violations(self) -> int:
        return self.violations_attachment + self.violations_domination

    @property
    def dominated(self) -> bool:
        return self.violations == 0


def simulate_coupled(law: OffspringLaw, xi0, horizon: float, seed: int, check: bool = True,
                     strict: bool = False, cap: int = POPULATION_CAP) -> CoupledRun:
    """Joint event-driven run of particles ``xi`` and the branching population ``zeta``.

    With ``check`` the attachment invariant ``zeta(i, xi(i)) >= 1`` and the
    domination ``R(xi) <= R(zeta)`` are verified after every event; ``strict``
    turns the first violation into an exception instead of a count.
    """
    xi = np.array(xi0, dtype=np.int64)
    N = xi.size
    if N < 2:
        raise ValueError("coupling needs at least two particles")
    if np.any(xi < 1):
        raise ValueError("positions must be >= 1")
    rng = generator(seed, 0)
    state = MultitypeState.from_particles(xi)
    attach = np.arange(N)
    rider = {int(k): int(i) for i, k in enumerate(attach)}  # individual -> particle
    b_rate = N * law.p0
    t, events, checks, bad_att, bad_dom = 0.0, 0, 0, 0, 0

    def verify():
        nonlocal checks, bad_att, bad_dom
        checks += 1
        ok_att = all(state.types[attach[i]] == i and state.position(attach[i]) == xi[i]
                     and state.count(i, int(xi[i])) >= 1 for i in range(N))
        ok_dom = int(xi.max()) <= state.rightmost
        bad_att += not ok_att
        bad_dom += not ok_dom
        if strict and not (ok_att and ok_dom):
            raise InvariantViolation(f"coupling invariant broken at t={t:.6g}")

    if check:
        verify()
    while True:
        total = state.index.total + b_rate
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            break
        events += 1
        if rng.random() * total < b_rate:
            j = int(rng.integers(N))
            i = int(rng.integers(N - 1))
            i += i >= j
            born = _branch(state, i, j)
            thin = law.p0 if xi[i] == 1 else 0.0  # q(xi(i), 0)
            if thin > 0 and rng.random() * law.p0 < thin:
                del rider[int(attach[i])]
                attach[i] = born[int(attach[j])]
                rider[int(attach[i])] = i
                xi[i] = xi[j]
            if state.size > cap:
                raise PopulationCapError(f"population {state.size} exceeds cap {cap}",
                                         CoupledRun(xi, state, attach, events, checks,
                                                    bad_att, bad_dom))
        else:
            m = state.index.sample(rng)
            y = _spatial_target(law, state.position(m), rng.random())
            state.move(m, y)
            p = rider.get(m)
            if p is not None:
                xi[p] = y
        if check:
            verify()
    return CoupledRun(xi, state, attach, events, checks, bad_att, bad_dom)


def coupled_replicas(law: OffspringLaw, xi0, horizon: float, n_replicas: int, seed: int,
                     check: bool = False) -> list[CoupledRun]:
    """Independent coupled runs; replica ``r`` uses seed ``(seed, r)``."""
    return [simulate_coupled(law, xi0, horizon, derive_seed(seed, r), check=check)
            for r in range(n_replicas)]


def write_coupling_csv(path: str | Path, horizon: float, runs: Sequence[CoupledRun]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "t", "zeta_size", "R_zeta", "R_xi", "dominated"])
        for r, run in enumerate(runs):
            w.writerow([r, horizon, run.zeta.size, run.zeta.rightmost, int(run.xi.max()),
                        int(run.dominated)])


# --------------------------------------------------------------------------
# reflected Galton-Watson


@njit(cache=True, nogil=True)
def _reflected_batch(x0, cum, v, horizon, seeds, n_total, block):
    final = np.empty(n_total, dtype=np.int64)
    excess = np.empty(n_total)
    visited_zero = 0
    for b in range(seeds.size):
        np.random.seed(seeds[b])
        for r in range(block):
            k = b * block + r
            if k >= n_total:
                break
            z = x0
            t = 0.0
            sup = -np.inf
            while True:
                t_next = t + np.random.exponential(1.0 / z)
                s = min(t_next, horizon)
                # Z is constant on [t, s) while the centring term decreases
                gap = z - math.exp(-v * s) * x0
                if gap > sup:
                    sup = gap
                if t_next >= horizon:
                    break
                t = t_next
                u = np.random.random()
                l = 0
                while cum[l] <= u:
                    l += 1
                if l == 0:
                    if z >= 2:
                        z -= 1
                else:
                    z += l - 1
                if z < 1:
                    visited_zero += 1
            final[k] = z
            excess[k] = sup
    return final, excess, visited_zero


@dataclass
class ReflectedSample:
    x0: int
    horizon: float
    final: np.ndarray
    sup_excess: np.ndarray
    visited_zero: int = 0

    def exp_moment(self, rho: float) -> tuple[float, float]:
        """Sample mean of ``exp(rho Z~_T)`` and its standard error."""
        e = np.exp(rho * self.final)
        return float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size))

    def exceedance(self, delta: float) -> float:
        return float(np.mean(self.sup_excess >= delta))


def simulate_reflected_gw(law: OffspringLaw, x0: int, horizon: float, seed: int,
                          n_replicas: int = 1, cell: int = 0) -> ReflectedSample:
    """Independent copies of the reflected process from ``x0``.

    Also records ``sup_{s < T} (Z~_s - exp(-v s) x0)`` for each copy.
    """
    if x0 < 1:
        raise ValueError("x0 must be >= 1")
    seeds = block_seeds(seed, cell, n_replicas)
    final, excess, zero = _reflected_batch(int(x0), law.cum, drift(law), float(horizon), seeds,
                                           int(n_replicas), BLOCK)
    return ReflectedSample(int(x0), float(horizon), final, excess, int(zero))


def reflected_path(law: OffspringLaw, x0: int, horizon: float, seed: int):
    """One path as ``(jump_times, values)``; ``values[0] = x0`` at time 0."""
    rng = generator(seed, 0)
    t, z = 0.0, int(x0)
    ts, zs = [0.0], [z]
    while True:
        t += rng.exponential(1.0 / z)
        if t >= horizon:
            break
        z = _spatial_target(law, z, rng.random())
        ts.append(t)
        zs.append(z)
    return np.array(ts), np.array(zs)


@dataclass
class LargeDeviationFit:
    deltas: np.ndarray
    frequencies: np.ndarray
    kappa: float
    bounds: np.ndarray

    @property
    def monotone(self) -> bool:
        """Nonincreasing in ``delta`` and strictly decreasing while positive."""
        f = self.frequencies
        return all(b <= a and (b < a or a == 0) for a, b in zip(f[:-1], f[1:]))

    @property
    def under_bound(self) -> bool:
        # equality holds at the delta that fixes kappa, up to rounding
        return bool(np.all(self.frequencies <= self.bounds * (1 + 1e-12)))


def fit_large_deviation(sample: ReflectedSample, deltas: Sequence[float]) -> LargeDeviationFit:
    """Largest ``kappa`` with ``P(sup excess >= delta) <= exp(-kappa delta^2 / (T max(x0, delta)))``
    at every ``delta`` with a positive empirical frequency."""
    deltas = np.asarray(deltas, dtype=float)
    freq = np.array([sample.exceedance(d) for d in deltas])
    scale = deltas**2 / (sample.horizon * np.maximum(sample.x0, deltas))
    pos = freq > 0
    kappa = float(np.min(-np.log(freq[pos]) / scale[pos])) if pos.any() else math.inf
    return LargeDeviationFit(deltas, freq, kappa, np.exp(-kappa * scale))
