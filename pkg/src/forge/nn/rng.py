"""Project-wide deterministic PRNG (xorshift64*).

Pure integer arithmetic so streams are identical across platforms and numpy
versions. Substreams are derived by hashing the parent seed with string
labels, which makes parameter initialization independent of layer order and
dropout masks a pure function of (seed, step, layer name).
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 64) - 1
_MULT = 2685821657736338717


class XorShift64(object):
    def __init__(self, seed: int):
        seed &= _MASK
        if seed == 0:
            seed = 0x9E3779B97F4A7C15
        self.state = seed

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x = (x ^ (x << 25)) & _MASK
        x ^= x >> 27
        self.state = x
        return (x * _MULT) & _MASK

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def fill_uniform(self, n: int, lo: float, hi: float) -> list[float]:
        return [self.uniform(lo, hi) for _ in range(n)]


def derive_seed(*parts: int | str) -> int:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, int):
            h.update(b"i")
            h.update((part & _MASK).to_bytes(8, "little"))
        else:
            raw = part.encode("utf-8")
            h.update(b"s")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
    return int.from_bytes(h.digest()[:8], "little")
