"""Event-driven simulation of the N-particle Fleming-Viot system.

Every particle at ``x`` carries ``x`` individuals, each firing at rate one:
the next event comes after an Exp(M1) time, the particle is chosen with
probability ``xi(i) / M1`` and an offspring count ``l ~ p`` decides the move.
``l = 1`` is a no-op, ``l >= 2`` moves up by ``l - 1`` and ``l = 0`` moves
down by one, except from site 1 where the particle instead copies the
position of a uniformly chosen other particle.

Hot loops are compiled with numba and seeded explicitly, so a run is a pure
function of ``(law, initial configuration, horizon, seed)``.
"""
from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .fenwick import WeightedIndex, fw_add, fw_build, fw_find, fw_prefix
from .gw_model import OffspringLaw, beta, constants, drift
from .seeding import BLOCK, block_seeds

N_PAIR = 3
# columns of the scalar accumulator
PSI, RIGHT, EXPR, MEAN1, MEAN2, RIGHT2, PAIR0 = range(7)
N_SCALARS = PAIR0 + N_PAIR * N_PAIR


class InvariantError(AssertionError):
    pass


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _offspring(cum):
    u = np.random.random()
    l = 0
    while cum[l] <= u:
        l += 1
    return l


@njit(cache=True)
def _target(pos, i, l, N):
    old = pos[i]
    if l >= 2:
        return old + l - 1
    if l == 1:
        return old
    if old >= 2:
        return old - 1
    j = np.random.randint(0, N - 1)
    if j >= i:
        j += 1
    return pos[j]


@njit(cache=True)
def _occupation(pos, cap):
    occ = np.zeros(cap, dtype=np.int64)
    for x in pos:
        occ[x] += 1
    return occ


@njit(cache=True)
def _grown(a, need):
    cap = a.shape[-1]
    while cap <= need:
        cap *= 2
    if a.ndim == 1:
        out = np.zeros(cap, dtype=a.dtype)
        out[: a.size] = a
    else:
        out = np.zeros((a.shape[0], cap), dtype=a.dtype)
        out[:, : a.shape[1]] = a
    return out


@njit(cache=True)
def _move(pos, tree, occ, sums, i, new):
    """Move particle ``i`` to ``new``; ``sums`` holds ``[M1, M2, R]``."""
    old = pos[i]
    pos[i] = new
    fw_add(tree, i, new - old)
    occ[old] -= 1
    occ[new] += 1
    sums[0] += new - old
    sums[1] += new * new - old * old
    if new > sums[2]:
        sums[2] = new
    elif old == sums[2]:
        r = old
        while occ[r] == 0:
            r -= 1
        sums[2] = r


@njit(cache=True)
def _check_state(pos, tree, occ, sums):
    N = pos.size
    if pos.min() < 1:
        raise AssertionError("particle below site 1")
    if occ.sum() != N:
        raise AssertionError("occupation does not sum to N")
    ref = np.zeros(occ.size, dtype=np.int64)
    for x in pos:
        ref[x] += 1
    for x in range(occ.size):
        if ref[x] != occ[x]:
            raise AssertionError("occupation index out of sync")
    if pos.sum() != sums[0] or fw_prefix(tree, N) != sums[0] or (pos * pos).sum() != sums[1]:
        raise AssertionError("moment / weight index out of sync")
    if pos.max() != sums[2]:
        raise AssertionError("rightmost position out of sync")


@njit(cache=True)
def _step(pos, tree, occ, sums, cum, N):
    """Draw the particle, offspring and target of one event (state untouched)."""
    i = fw_find(tree, np.random.randint(0, sums[0]))
    l = _offspring(cum)
    return i, l, _target(pos, i, l, N)


@njit(cache=True)
def _run_events(pos0, cum, horizon, seed, record, check_every, max_events):
    np.random.seed(seed)
    N = pos0.size
    pos = pos0.copy()
    tree = fw_build(pos)
    occ = _occupation(pos, 2 * pos.max() + 64)
    sums = np.array([pos.sum(), (pos * pos).sum(), pos.max()], dtype=np.int64)
    cap = 1024 if record else 1
    ev_t = np.empty(cap)
    ev = np.empty((cap, 4), dtype=np.int64)
    t = 0.0
    n = 0
    while True:
        t += np.random.exponential(1.0 / sums[0])
        if t > horizon:
            break
        i, l, new = _step(pos, tree, occ, sums, cum, N)
        old = pos[i]
        if new >= occ.size:
            occ = _grown(occ, new)
        if new != old:
            _move(pos, tree, occ, sums, i, new)
        if record:
            if n == ev_t.size:
                ev_t2 = np.empty(2 * n)
                ev_t2[:n] = ev_t
                ev2 = np.empty((2 * n, 4), dtype=np.int64)
                ev2[:n] = ev
                ev_t, ev = ev_t2, ev2
            ev_t[n] = t
            ev[n, 0] = i
            ev[n, 1] = l
            ev[n, 2] = old
            ev[n, 3] = new
        n += 1
        if check_every > 0 and n % check_every == 0:
            _check_state(pos, tree, occ, sums)
        if n >= max_events:
            raise RuntimeError("event budget exhausted")
    m = n if record else 0
    return pos, n, ev_t[:m].copy(), ev[:m].copy()


@njit(cache=True)
def _accumulate(acc, vals, a, b, burn, width, nb):
    """Add ``vals * |[a, b) & batch_k|`` into row ``k`` for every overlapping batch."""
    if b <= burn:
        return
    if a < burn:
        a = burn
    k = int((a - burn) / width)
    if k >= nb:
        k = nb - 1
    while a < b:
        end = b if k == nb - 1 else min(b, burn + (k + 1) * width)
        if end > a:
            for c in range(vals.size):
                acc[k, c] += vals[c] * (end - a)
        a = end
        k += 1


@njit(cache=True)
def _accumulate_col(acc, col, val, a, b, burn, width, nb):
    if b <= burn or val == 0:
        return
    if a < burn:
        a = burn
    k = int((a - burn) / width)
    if k >= nb:
        k = nb - 1
    while a < b:
        end = b if k == nb - 1 else min(b, burn + (k + 1) * width)
        if end > a:
            acc[k, col] += val * (end - a)
        a = end
        k += 1


@njit(cache=True, nogil=True)
def _run_stationary(pos0, cum, horizon, burn_in, nb, rho, seed, check_every):
    np.random.seed(seed)
    N = pos0.size
    pos = pos0.copy()
    tree = fw_build(pos)
    cap = 2 * pos.max() + 64
    occ = _occupation(pos, cap)
    last = np.zeros(cap)
    occ_acc = np.zeros((nb, cap))
    sc_acc = np.zeros((nb, N_SCALARS))
    vals = np.zeros(N_SCALARS)
    sums = np.array([pos.sum(), (pos * pos).sum(), pos.max()], dtype=np.int64)
    width = (horizon - burn_in) / nb
    inv_n2 = 1.0 / (N * N)
    t = 0.0
    n = 0
    max_seen = sums[2]
    while True:
        t_next = t + np.random.exponential(1.0 / sums[0])
        if t_next > burn_in:
            vals[PSI] = sums[1] / sums[0]
            vals[RIGHT] = sums[2]
            vals[EXPR] = math.exp(rho * sums[2])
            vals[MEAN1] = sums[0] / N
            vals[MEAN2] = sums[1] / N
            vals[RIGHT2] = sums[2] * sums[2]
            for a in range(N_PAIR):
                for b in range(N_PAIR):
                    vals[PAIR0 + N_PAIR * a + b] = occ[a + 1] * occ[b + 1] * inv_n2
            _accumulate(sc_acc, vals, t, min(t_next, horizon), burn_in, width, nb)
        if t_next >= horizon:
            break
        t = t_next
        i, l, new = _step(pos, tree, occ, sums, cum, N)
        old = pos[i]
        if new != old:
            if new >= occ.size:
                occ = _grown(occ, new)
                last = _grown(last, new)
                occ_acc = _grown(occ_acc, new)
            _accumulate_col(occ_acc, old, occ[old], last[old], t, burn_in, width, nb)
            _accumulate_col(occ_acc, new, occ[new], last[new], t, burn_in, width, nb)
            last[old] = t
            last[new] = t
            _move(pos, tree, occ, sums, i, new)
            if new > max_seen:
                max_seen = new
        n += 1
        if check_every > 0 and n % check_every == 0:
            _check_state(pos, tree, occ, sums)
    for x in range(1, max_seen + 1):
        _accumulate_col(occ_acc, x, occ[x], last[x], horizon, burn_in, width, nb)
    return occ_acc[:, : max_seen + 1].copy(), sc_acc, n, max_seen


@njit(cache=True)
def _advance(pos, cum, t_end, check_every):
    """Run one copy from ``pos`` (modified in place) up to time ``t_end``."""
    N = pos.size
    tree = fw_build(pos)
    occ = _occupation(pos, 2 * pos.max() + 64)
    sums = np.array([pos.sum(), (pos * pos).sum(), pos.max()], dtype=np.int64)
    t = 0.0
    n = 0
    while True:
        t += np.random.exponential(1.0 / sums[0])
        if t > t_end:
            break
        i, l, new = _step(pos, tree, occ, sums, cum, N)
        if new != pos[i]:
            if new >= occ.size:
                occ = _grown(occ, new)
            _move(pos, tree, occ, sums, i, new)
        n += 1
        if check_every > 0 and n % check_every == 0:
            _check_state(pos, tree, occ, sums)
    return occ, n


@njit(cache=True, nogil=True)
def _replicas_occupation(pos0, cum, t, seeds, first_block, n_blocks, block, n_total, K):
    """Occupation counts ``eta(x)`` for ``x = 0..K-1`` (column 0 counts sites >= K)."""
    out = np.zeros((n_blocks * block, K), dtype=np.int32)
    events = 0
    row = 0
    for b in range(first_block, first_block + n_blocks):
        np.random.seed(seeds[b])
        for r in range(block):
            if b * block + r >= n_total:
                break
            pos = pos0.copy()
            occ, n = _advance(pos, cum, t, 0)
            events += n
            for x in pos:
                if x < K:
                    out[row, x] += 1
                else:
                    out[row, 0] += 1
            row += 1
    return out[:row], events


@njit(cache=True, nogil=True)
def _replicas_moments(pos0, cum, times, seeds, first_block, n_blocks, block, n_total, K):
    """Per-block sums of ``eta(x)`` and ``eta(x) eta(y)`` (``x, y < K``) at each sample time."""
    nt = times.size
    s1 = np.zeros((n_blocks, nt, K))
    s2 = np.zeros((n_blocks, nt, K, K))
    cnt = np.zeros(n_blocks, dtype=np.int64)
    N = pos0.size
    for bb in range(n_blocks):
        b = first_block + bb
        np.random.seed(seeds[b])
        for r in range(block):
            if b * block + r >= n_total:
                break
            pos = pos0.copy()
            tree = fw_build(pos)
            occ = _occupation(pos, 2 * pos.max() + 64)
            sums = np.array([pos.sum(), (pos * pos).sum(), pos.max()], dtype=np.int64)
            t = 0.0
            k = 0
            while k < nt:
                t_next = t + np.random.exponential(1.0 / sums[0])
                while k < nt and times[k] < t_next:
                    for x in range(1, K):
                        ex = occ[x] if x < occ.size else 0
                        if ex == 0:
                            continue
                        s1[bb, k, x] += ex
                        for y in range(1, K):
                            ey = occ[y] if y < occ.size else 0
                            s2[bb, k, x, y] += ex * ey
                    k += 1
                if k == nt:
                    break
                t = t_next
                i, l, new = _step(pos, tree, occ, sums, cum, N)
                if new != pos[i]:
                    if new >= occ.size:
                        occ = _grown(occ, new)
                    _move(pos, tree, occ, sums, i, new)
            cnt[bb] += 1
    return s1, s2, cnt


@njit(cache=True, nogil=True)
def _replicas_final(pos0, cum, t, seeds, first_block, n_blocks, block, n_total):
    out = np.empty((n_blocks * block, pos0.size), dtype=np.int64)
    row = 0
    for b in range(first_block, first_block + n_blocks):
        np.random.seed(seeds[b])
        for r in range(block):
            if b * block + r >= n_total:
                break
            pos = pos0.copy()
            _advance(pos, cum, t, 0)
            out[row] = pos
            row += 1
    return out[:row]


# --------------------------------------------------------------------------
# configurations
# --------------------------------------------------------------------------

@dataclass
class ParticleConfig:
    """Positions ``xi(1..N)`` with occupation counts and a position-weighted index."""

    positions: np.ndarray
    weight_index: WeightedIndex = field(init=False, repr=False)

    def __post_init__(self):
        p = np.array(self.positions, dtype=np.int64).ravel()
        if p.size < 2:
            raise ValueError("Fleming-Viot needs N >= 2 particles")
        if p.min() < 1:
            raise ValueError("positions must be >= 1")
        self.positions = p
        self.weight_index = WeightedIndex(p)

    @classmethod
    def all_at_one(cls, N: int) -> "ParticleConfig":
        return cls(np.ones(N, dtype=np.int64))

    @property
    def N(self) -> int:
        return self.positions.size

    @property
    def occupation(self) -> dict[int, int]:
        xs, cs = np.unique(self.positions, return_counts=True)
        return dict(zip(xs.tolist(), cs.tolist()))

    def occupation_array(self, L: int | None = None) -> np.ndarray:
        """``eta[x]`` for ``x = 0..L`` (``eta[0] = 0``)."""
        L = int(self.positions.max()) if L is None else L
        return np.bincount(self.positions, minlength=L + 1)[: L + 1]

    def move(self, i: int, y: int) -> None:
        self.positions[i] = y
        self.weight_index[i] = y

    def check(self) -> None:
        occ = self.occupation
        if sum(occ.values()) != self.N or self.weight_index.total != self.positions.sum():
            raise InvariantError("configuration indexes out of sync")


def _as_positions(xi) -> np.ndarray:
    if isinstance(xi, ParticleConfig):
        return xi.positions
    p = np.asarray(xi, dtype=np.int64)
    if p.size < 2 or p.min() < 1:
        raise ValueError("need N >= 2 particles at positions >= 1")
    return p


def empirical_measure(xi) -> dict[int, float]:
    """``m(x) = eta(x) / N`` on the occupied sites."""
    p = _as_positions(xi)
    xs, cs = np.unique(p, return_counts=True)
    return {int(x): c / p.size for x, c in zip(xs, cs)}


def empirical_vector(xi, L: int) -> np.ndarray:
    """``m(1..L)`` as an array (index 0 is site 1)."""
    p = _as_positions(xi)
    return np.bincount(p, minlength=L + 1)[1: L + 1] / p.size


def psi(xi) -> float:
    """Ratio of second to first moment of the positions."""
    p = _as_positions(xi).astype(float)
    return float(np.dot(p, p) / p.sum())


def rightmost(xi) -> int:
    return int(_as_positions(xi).max())


# --------------------------------------------------------------------------
# simulation front ends
# --------------------------------------------------------------------------

@dataclass
class EventStream:
    """All events of a run: time, particle, offspring draw, old and new site."""

    initial: np.ndarray
    times: np.ndarray
    particle: np.ndarray
    offspring: np.ndarray
    old: np.ndarray
    new: np.ndarray
    final: np.ndarray
    horizon: float
    seed: int

    def __len__(self) -> int:
        return self.times.size

    def state_at(self, t: float) -> np.ndarray:
        """Configuration at time ``t`` (right-continuous)."""
        pos = self.initial.copy()
        k = int(np.searchsorted(self.times, t, side="right"))
        for i, y in zip(self.particle[:k], self.new[:k]):
            pos[i] = y
        return pos

    def sample(self, times: Sequence[float]) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) < 0):
            raise ValueError("sample times must be nondecreasing")
        out = np.empty((times.size, self.initial.size), dtype=np.int64)
        pos = self.initial.copy()
        k = 0
        for row, t in enumerate(times):
            while k < self.times.size and self.times[k] <= t:
                pos[self.particle[k]] = self.new[k]
                k += 1
            out[row] = pos
        return out


def simulate(law: OffspringLaw, xi0, horizon: float, seed: int, check_every: int = 10_000,
             max_events: int = 50_000_000) -> EventStream:
    """Exact simulation on ``[0, horizon]``, recording every event.

    ``check_every=1`` verifies the occupation and weight indexes after each event.
    """
    pos0 = _as_positions(xi0).copy()
    if horizon <= 0:
        e = np.empty(0, dtype=np.int64)
        return EventStream(pos0, np.empty(0), e, e, e, e, pos0.copy(), float(horizon), seed)
    final, n, ev_t, ev = _run_events(pos0, law.cum, float(horizon), int(seed), True,
                                     int(check_every), int(max_events))
    return EventStream(pos0, ev_t, ev[:, 0], ev[:, 1], ev[:, 2], ev[:, 3], final,
                       float(horizon), int(seed))


def total_rate(xi) -> int:
    """Total event rate at ``xi``: one per unit of position."""
    return int(_as_positions(xi).sum())


@dataclass
class TrajectoryStats:
    """Time integrals over ``[burn_in, horizon]`` split into equal-length batches.

    ``occupation[k, x]`` integrates ``eta(x)`` over batch ``k``; ``scalars[k, c]``
    integrates the per-configuration observables listed in ``SCALAR_NAMES``.
    """

    N: int
    horizon: float
    burn_in: float
    rho: float
    seed: int
    occupation: np.ndarray
    scalars: np.ndarray
    events: int
    max_site: int
    wall_time: float = 0.0

    SCALAR_NAMES = ("psi", "R", "exp_rho_R", "M1_over_N", "M2_over_N", "R2") + tuple(
        f"m{a + 1}m{b + 1}" for a in range(N_PAIR) for b in range(N_PAIR))

    @property
    def batches(self) -> int:
        return self.scalars.shape[0]

    @property
    def batch_width(self) -> float:
        return (self.horizon - self.burn_in) / self.batches

    @property
    def elapsed(self) -> float:
        return self.horizon - self.burn_in

    def batch_means(self, name: str) -> np.ndarray:
        return self.scalars[:, self.SCALAR_NAMES.index(name)] / self.batch_width

    def mean(self, name: str) -> float:
        return float(self.scalars[:, self.SCALAR_NAMES.index(name)].sum() / self.elapsed)

    def m_batches(self) -> np.ndarray:
        """Per-batch time-averaged ``m(x)``, column ``x - 1`` for site ``x``."""
        return self.occupation[:, 1:] / (self.N * self.batch_width)

    def m_bar(self) -> np.ndarray:
        return self.occupation[:, 1:].sum(axis=0) / (self.N * self.elapsed)

    def pair_mean(self, x: int, y: int) -> float:
        return self.mean(f"m{x}m{y}")


def stationary_run(law: OffspringLaw, N: int, horizon: float, seed: int,
                   burn_in: float | None = None, rho: float | None = None,
                   batches: int = 20, xi0=None, check_every: int = 10_000) -> TrajectoryStats:
    """Time-weighted averages over ``[burn_in, horizon]`` of one long trajectory.

    ``rho`` defaults to half the exponent where the reflected exponential
    moment bound stops holding; larger values only warn.
    """
    burn_in = horizon / 10 if burn_in is None else burn_in
    if not 0 <= burn_in < horizon:
        raise ValueError("need 0 <= burn_in < horizon")
    b = beta(law)
    if rho is None:
        rho = b / 2
    elif rho >= b:
        warnings.warn(f"rho={rho:g} >= beta={b:g}: exponential moment not controlled",
                      RuntimeWarning, stacklevel=2)
    pos0 = np.ones(N, dtype=np.int64) if xi0 is None else _as_positions(xi0).copy()
    if pos0.size != N:
        raise ValueError("initial configuration has the wrong size")
    tic = time.perf_counter()
    occ, sc, n, max_site = _run_stationary(pos0, law.cum, float(horizon), float(burn_in),
                                           int(batches), float(rho), int(seed), int(check_every))
    return TrajectoryStats(N, float(horizon), float(burn_in), float(rho), int(seed), occ, sc,
                           int(n), int(max_site), time.perf_counter() - tic)


def _split_blocks(n_blocks: int, threads: int):
    threads = max(1, min(threads, n_blocks))
    edges = np.linspace(0, n_blocks, threads + 1).astype(int)
    return [(int(a), int(b - a)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def replicas_occupation(law: OffspringLaw, xi0, t: float, n_replicas: int, seed: int,
                        cell: int = 0, K: int = 32, threads: int = 1) -> np.ndarray:
    """Occupation counts at time ``t`` for independent copies started from ``xi0``.

    Returns an ``(n_replicas, K)`` integer array; column ``x`` holds ``eta(x)``
    for ``1 <= x < K`` and column 0 the number of particles at sites ``>= K``.
    """
    pos0 = _as_positions(xi0).copy()
    seeds = block_seeds(seed, cell, n_replicas)
    parts = _split_blocks(seeds.size, threads)
    run = lambda ab: _replicas_occupation(pos0, law.cum, float(t), seeds, ab[0], ab[1], BLOCK,
                                          n_replicas, K)[0]
    if len(parts) == 1:
        return run(parts[0])
    with ThreadPoolExecutor(len(parts)) as ex:
        return np.concatenate(list(ex.map(run, parts)))


def replicas_final(law: OffspringLaw, xi0, t: float, n_replicas: int, seed: int,
                   cell: int = 0, threads: int = 1) -> np.ndarray:
    """Final configurations at time ``t`` of independent copies, one row each."""
    pos0 = _as_positions(xi0).copy()
    seeds = block_seeds(seed, cell, n_replicas)
    parts = _split_blocks(seeds.size, threads)
    run = lambda ab: _replicas_final(pos0, law.cum, float(t), seeds, ab[0], ab[1], BLOCK,
                                     n_replicas)
    if len(parts) == 1:
        return run(parts[0])
    with ThreadPoolExecutor(len(parts)) as ex:
        return np.concatenate(list(ex.map(run, parts)))


@dataclass
class ReplicaMoments:
    """Replica sums of ``eta`` and ``eta eta^T`` at sample times, kept per seeded block."""

    N: int
    times: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    counts: np.ndarray

    @property
    def replicas(self) -> int:
        return int(self.counts.sum())

    def pooled(self, blocks=None):
        """``(E m(x), E m(x) m(y))`` estimates over the selected blocks."""
        sel = slice(None) if blocks is None else blocks
        n = self.counts[sel].sum()
        m1 = self.s1[sel].sum(axis=0) / (n * self.N)
        m2 = self.s2[sel].sum(axis=0) / (n * self.N * self.N)
        return m1, m2


def replicas_moments(law: OffspringLaw, xi0, times: Sequence[float], n_replicas: int, seed: int,
                     cell: int = 0, K: int = 16, threads: int = 1) -> ReplicaMoments:
    """First and second moments of the occupation numbers at ``times``, from
    independent copies started at ``xi0``."""
    pos0 = _as_positions(xi0).copy()
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times.size == 0:
        raise ValueError("times must be a nonempty nondecreasing sequence")
    seeds = block_seeds(seed, cell, n_replicas)
    parts = _split_blocks(seeds.size, threads)
    run = lambda ab: _replicas_moments(pos0, law.cum, times, seeds, ab[0], ab[1], BLOCK,
                                       n_replicas, K)
    if len(parts) == 1:
        res = [run(parts[0])]
    else:
        with ThreadPoolExecutor(len(parts)) as ex:
            res = list(ex.map(run, parts))
    return ReplicaMoments(pos0.size, times, np.concatenate([r[0] for r in res]),
                          np.concatenate([r[1] for r in res]), np.concatenate([r[2] for r in res]))


# --------------------------------------------------------------------------
# exact generator
# --------------------------------------------------------------------------

def _moved(pos: np.ndarray, i: int, y: int) -> np.ndarray:
    out = pos.copy()
    out[i] = y
    return out


def jump_rates(law: OffspringLaw, xi) -> list[tuple[int, int, float]]:
    """All ``(i, y, rate)`` with positive rate under the Fleming-Viot generator."""
    pos = _as_positions(xi)
    N = pos.size
    xs, cs = np.unique(pos, return_counts=True)
    out = []
    for i, x in enumerate(pos.tolist()):
        for l, pl in enumerate(law.probs):
            if l == 1 or pl == 0:
                continue
            if l >= 2:
                out.append((i, x + l - 1, x * pl))
            elif x >= 2:
                out.append((i, x - 1, x * pl))
            else:
                # absorbed at 1: relocate to y at rate q(1,0) * N/(N-1) * m(y)
                for y, c in zip(xs.tolist(), cs.tolist()):
                    if y != x:
                        out.append((i, y, pl * c / (N - 1)))
    return out


def apply_generator(law: OffspringLaw, f: Callable[[np.ndarray], float], xi,
                    symmetric: bool = False) -> float:
    """Exact ``L^N f(xi)`` by enumerating every transition.

    With ``symmetric=True`` ``f`` is assumed to depend on the configuration only
    through its occupation numbers, and particles on the same site are grouped.
    """
    pos = _as_positions(xi)
    N = pos.size
    f0 = f(pos)
    total = 0.0
    if not symmetric:
        for i, y, r in jump_rates(law, pos):
            total += r * (f(_moved(pos, i, y)) - f0)
        return float(total)
    xs, cs = np.unique(pos, return_counts=True)
    for x, c in zip(xs.tolist(), cs.tolist()):
        i = int(np.flatnonzero(pos == x)[0])
        for l, pl in enumerate(law.probs):
            if l == 1 or pl == 0:
                continue
            if l >= 2 or x >= 2:
                y = x + l - 1
                total += c * x * pl * (f(_moved(pos, i, y)) - f0)
            else:
                for y, cy in zip(xs.tolist(), cs.tolist()):
                    if y != x:
                        total += c * pl * cy / (N - 1) * (f(_moved(pos, i, y)) - f0)
    return float(total)


def _move_one(pos: np.ndarray, x: int, y: int) -> np.ndarray:
    i = int(np.flatnonzero(pos == x)[0])
    return _moved(pos, i, y)


def generator_refeed(law: OffspringLaw, f: Callable[[np.ndarray], float], xi) -> float:
    """Refeeding part: ``p(0) eta(1) sum_x eta(x)/(N-1) [f(eta - e_1 + e_x) - f(eta)]``."""
    pos = _as_positions(xi)
    N = pos.size
    xs, cs = np.unique(pos, return_counts=True)
    eta1 = int(cs[0]) if xs[0] == 1 else 0
    if eta1 == 0:
        return 0.0
    f0 = f(pos)
    return sum(law.p0 * eta1 * c / (N - 1) * (f(_move_one(pos, 1, x)) - f0)
               for x, c in zip(xs.tolist(), cs.tolist()))


def generator_drift(law: OffspringLaw, f: Callable[[np.ndarray], float], xi) -> float:
    """Spatial part: down-moves from ``x >= 2`` and up-moves by ``i = l - 1 >= 1``."""
    pos = _as_positions(xi)
    xs, cs = np.unique(pos, return_counts=True)
    f0 = f(pos)
    total = 0.0
    for x, c in zip(xs.tolist(), cs.tolist()):
        if x >= 2:
            total += x * c * law.p0 * (f(_move_one(pos, x, x - 1)) - f0)
        for i in range(1, law.probs.size - 1):
            pi = law.probs[i + 1]
            if pi:
                total += x * c * pi * (f(_move_one(pos, x, x + i)) - f0)
    return total


def generator_psi(law: OffspringLaw, xi) -> float:
    """``L^N psi(xi)`` in closed form from ``M1``, ``M2`` and the occupation numbers."""
    pos = _as_positions(xi)
    N = pos.size
    xs, cs = np.unique(pos, return_counts=True)
    xs = xs.astype(float)
    cs = cs.astype(float)
    M1 = float(pos.sum())
    M2 = float(np.dot(pos.astype(float), pos))
    psi0 = M2 / M1

    def delta(x, y):
        return (M2 - x * x + y * y) / (M1 - x + y) - psi0

    total = 0.0
    for l, pl in enumerate(law.probs):
        if l == 1 or pl == 0:
            continue
        if l >= 2:
            total += pl * float(np.sum(cs * xs * delta(xs, xs + l - 1)))
        else:
            up = xs >= 2
            total += pl * float(np.sum(cs[up] * xs[up] * delta(xs[up], xs[up] - 1)))
            if xs[0] == 1:
                total += pl * cs[0] / (N - 1) * float(np.sum(cs * delta(1.0, xs)))
    return total


def lyapunov_rhs(law: OffspringLaw, xi) -> float:
    """``-v psi + 24 p(0) R^2 / N + C0`` with ``C0 = 2 p(0) + sum_i p(i+1) i^2``."""
    pos = _as_positions(xi)
    c = constants(law)
    R = float(pos.max())
    return -c.v * psi(pos) + 24 * law.p0 * R * R / pos.size + c.lyapunov_constant


@dataclass(frozen=True)
class FiniteDifference:
    estimate: float
    stderr: float
    exact: float

    @property
    def z_score(self) -> float:
        if self.stderr == 0:
            return 0.0 if self.estimate == self.exact else math.inf
        return (self.estimate - self.exact) / self.stderr


def finite_difference_generator(law: OffspringLaw, fs: Sequence[Callable[[np.ndarray], float]],
                                xi, h: float = 1e-3, replicas: int = 10**6, seed: int = 0,
                                threads: int = 1) -> list[FiniteDifference]:
    """Monte Carlo ``(E f(xi_h) - f(xi)) / h`` for each test function, next to the
    exact generator value."""
    pos = _as_positions(xi).copy()
    final = replicas_final(law, pos, h, replicas, seed, threads=threads)
    uniq, inverse, counts = np.unique(final, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    out = []
    for f in fs:
        f0 = f(pos)
        vals = np.array([f(row) - f0 for row in uniq])
        d = vals[inverse] / h
        out.append(FiniteDifference(float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size)),
                                    float(apply_generator(law, f, pos))))
    return out
