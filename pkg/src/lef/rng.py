"""Deterministic random number generation for the synthetic world.

Uses xoshiro256** seeded through splitmix64 so that sequences are
bit-exactly reproducible from a single u64 seed, independent of platform
and of any third-party RNG implementation details.

Test vectors (any reimplementation must match these exactly):

    splitmix64 stream from seed 0:
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F

    xoshiro256** seeded via splitmix64(42), first four outputs:
        0x15780B2E0C2EC716, 0x6104D9866D113A7E,
        0xAE17533239E499A1, 0xECB8AD4703B360A1

    next_float of a fresh generator with seed 7:
        0.7005764821796896
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1


def _splitmix64_stream(seed: int):
    x = seed & _MASK
    while True:
        x = (x + 0x9E3779B97F4A7C15) & _MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        yield z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** generator with splitmix64 state initialization."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        g = _splitmix64_stream(seed)
        self._s = [next(g) for _ in range(4)]

    def next_u64(self) -> int:
        s = self._s
        out = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return out

    def next_float(self) -> float:
        """Uniform double in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def next_below(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (_MASK + 1) - ((_MASK + 1) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def gauss(self, sigma: float = 1.0, clip: float | None = None) -> float:
        """Standard Box-Muller normal draw, optionally clipped to +-clip*sigma."""
        u1 = self.next_float()
        u2 = self.next_float()
        while u1 <= 0.0:
            u1 = self.next_float()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        if clip is not None:
            z = max(-clip, min(clip, z))
        return z * sigma

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct indices from {n}")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = i + self.next_below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def split(self) -> "Rng":
        """Derive an independent child generator (consumes one draw)."""
        return Rng(self.next_u64())
