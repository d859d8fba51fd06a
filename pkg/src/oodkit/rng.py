"""Deterministic random streams.

Every draw in the package comes from a ``numpy.random.Generator`` (PCG64)
seeded through ``SeedSequence`` with an explicit spawn key, so the stream used
for e.g. the forward noise of input 17 at start 40 does not depend on how many
other draws happened before it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngHandle:
    """A 64-bit seed plus a stream path.

    ``handle.child("epoch", 3).child("batch", 7).generator()`` always yields
    the same generator for the same seed.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    def child(self, *keys) -> "RngHandle":
        return RngHandle(self.seed, self.path + tuple(_key_part(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape, *keys) -> np.ndarray:
        """Unit Gaussian draw (float32) from the stream ``child(*keys)``."""
        return self.child(*keys).generator().standard_normal(shape, dtype=np.float32)
