"""Binary indexed tree over integer weights: O(log n) update and weighted draw.

The ``fw_*`` kernels work on a plain ``int64`` array (1-based tree, slot 0
unused) so they can be inlined in compiled event loops; ``WeightedIndex``
wraps them for Python callers.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def fw_build(weights):
    n = weights.size
    tree = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        tree[i + 1] += weights[i]
        j = (i + 1) + ((i + 1) & -(i + 1))
        if j <= n:
            tree[j] += tree[i + 1]
    return tree


@njit(cache=True)
def fw_add(tree, i, delta):
    """Add ``delta`` to the weight of item ``i`` (0-based)."""
    n = tree.size - 1
    k = i + 1
    while k <= n:
        tree[k] += delta
        k += k & -k


@njit(cache=True)
def fw_prefix(tree, i):
    """Sum of weights of items ``0..i-1``."""
    s = 0
    k = i
    while k > 0:
        s += tree[k]
        k -= k & -k
    return s


@njit(cache=True)
def fw_find(tree, target):
    """Smallest item ``i`` with ``prefix(i + 1) > target``; requires ``0 <= target < total``."""
    n = tree.size - 1
    pos = 0
    step = 1
    while step * 2 <= n:
        step *= 2
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= target:
            pos = nxt
            target -= tree[nxt]
        step //= 2
    return pos


class WeightedIndex:
    """Dynamic integer weights with proportional sampling.

    >>> idx = WeightedIndex([1, 2, 3])
    >>> idx.total
    6
    >>> idx.find(0), idx.find(1), idx.find(3)
    (0, 1, 2)
    """

    def __init__(self, weights=(), capacity: int | None = None):
        w = np.asarray(weights, dtype=np.int64)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        self._n = w.size
        cap = max(capacity or 0, self._n, 4)
        self._w = np.zeros(cap, dtype=np.int64)
        self._w[: self._n] = w
        self._tree = fw_build(self._w)
        self._total = int(w.sum())

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < self._n:
            raise IndexError(i)
        return int(self._w[i])

    def __setitem__(self, i: int, w: int):
        if not 0 <= i < self._n:
            raise IndexError(i)
        if w < 0:
            raise ValueError("weights must be nonnegative")
        delta = int(w) - int(self._w[i])
        if delta:
            self._w[i] = w
            fw_add(self._tree, i, delta)
            self._total += delta

    @property
    def total(self) -> int:
        return self._total

    def weights(self) -> np.ndarray:
        return self._w[: self._n].copy()

    def append(self, w: int) -> int:
        if self._n == self._w.size:
            grown = np.zeros(2 * self._w.size, dtype=np.int64)
            grown[: self._n] = self._w[: self._n]
            self._w = grown
            self._tree = fw_build(self._w)
        self._n += 1
        self[self._n - 1] = w
        return self._n - 1

    def extend(self, ws) -> None:
        ws = np.asarray(ws, dtype=np.int64)
        need = self._n + ws.size
        if need > self._w.size:
            cap = self._w.size
            while cap < need:
                cap *= 2
            grown = np.zeros(cap, dtype=np.int64)
            grown[: self._n] = self._w[: self._n]
            self._w = grown
        self._w[self._n: need] = ws
        self._n = need
        self._tree = fw_build(self._w)
        self._total += int(ws.sum())

    def find(self, target: int) -> int:
        if not 0 <= target < self._total:
            raise ValueError("target outside [0, total)")
        return int(fw_find(self._tree, target))

    def sample(self, rng: np.random.Generator) -> int:
        """Item ``i`` with probability ``w_i / total``."""
        return self.find(int(rng.integers(self._total)))
