"""Seeded, splittable random streams.

Everything random in the pipeline draws from PCG64 seeded through
``numpy.random.SeedSequence``. Substreams are named by integer keys (for
example a partition's date ordinal), so a partition's draws do not depend on
which other partitions exist or in what order they run.
"""

from __future__ import annotations

import numpy as np

_TWO64 = 1 << 64
_BATCH = 4096


def seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    if seed < 0 or seed >= _TWO64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))


def generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *key)))


class Stream:
    """Exact-uniform integer draws from the raw PCG64 output.

    ``randbelow`` uses rejection on raw 64-bit words, so the result depends
    only on the PCG64 stream, which numpy keeps stable across releases.
    """

    def __init__(self, seed: int, *key: int):
        self._bitgen = np.random.PCG64(seed_sequence(seed, *key))
        self._buf: list[int] = []

    def _next_raw(self) -> int:
        if not self._buf:
            self._buf = self._bitgen.random_raw(_BATCH).tolist()
            self._buf.reverse()
        return self._buf.pop()

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        if n == 1:
            return 0
        cutoff = _TWO64 - _TWO64 % n
        while True:
            x = self._next_raw()
            if x < cutoff:
                return x % n
