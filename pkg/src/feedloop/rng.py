"""Keyed random streams.

Every stochastic decision draws from a generator keyed by
``(master seed, purpose, step, entity)``. No stream is shared between
agents, so evaluation order and parallelism cannot change a result, and two
runs that differ only after step ``t`` consume identical randomness before it.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def stream(seed: int, purpose: str, step: int = 0, entity: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed & _MASK, _tag(purpose), step, entity])
