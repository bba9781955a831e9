"""Reproducible seed derivation for replicas and sweep cells.

Replica block ``b`` of sweep cell ``c`` under master seed ``s`` is seeded from
``SeedSequence(s, spawn_key=(c, b))``: a pure function of the three integers,
so results never depend on how blocks are scheduled over threads.
"""
from __future__ import annotations

import numpy as np

BLOCK = 1024  # replicas per seeded block


def derive_seed(master: int, *key: int) -> int:
    """32-bit seed for the counter ``key`` under ``master``."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def block_seeds(master: int, cell: int, n_replicas: int, block: int = BLOCK) -> np.ndarray:
    n_blocks = -(-n_replicas // block)
    return np.array([derive_seed(master, cell, b) for b in range(n_blocks)], dtype=np.int64)


def generator(master: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master),
                                                        spawn_key=tuple(int(k) for k in key)))
