"""Portable xoshiro256** generator seeded through splitmix64.

Every stochastic routine in the package takes an explicit :class:`Rng`.  The
bit stream depends only on the seed, so draws are reproducible across
platforms and could be re-derived in any language.
"""

import math

import numpy as np

_MASK = (1 << 64) - 1
_TWO_53 = 1.0 / (1 << 53)


def splitmix64(state):
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(*parts):
    """Mix integers into one 64-bit seed (used for per-epoch / per-utterance streams)."""
    state = 0
    out = 0
    for p in parts:
        state, out = splitmix64((state ^ (int(p) & _MASK)) & _MASK)
        state = out
    return out


class Rng:
    """xoshiro256** with a small set of derived draws.

    Derived draws are defined on top of :meth:`next_u64` only:

    * ``uniform()``: top 53 bits scaled to [0, 1)
    * ``randbelow(n)``: rejection sampling on the full 64-bit word
    * ``normal()``: Box-Muller on two uniforms, cosine branch only
    """

    __slots__ = ("_s",)

    def __init__(self, seed=0):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    # -- state -----------------------------------------------------------
    def get_state(self):
        return list(self._s)

    def set_state(self, state):
        if len(state) != 4:
            raise ValueError("xoshiro256** state must hold four 64-bit words")
        self._s = [int(v) & _MASK for v in state]

    @classmethod
    def from_state(cls, state):
        r = cls(0)
        r.set_state(state)
        return r

    def spawn(self):
        """Independent child stream seeded from this stream's next word."""
        return Rng(self.next_u64())

    # -- core ------------------------------------------------------------
    def next_u64(self):
        s0, s1, s2, s3 = self._s
        m = (s1 * 5) & _MASK
        result = ((((m << 7) | (m >> 57)) & _MASK) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self):
        return (self.next_u64() >> 11) * _TWO_53

    def randbelow(self, n):
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError(f"randbelow needs n >= 1, got {n}")
        if n == 1:
            return 0
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def randint(self, lo, hi):
        """Uniform integer in the closed range ``[lo, hi]``."""
        return lo + self.randbelow(hi - lo + 1)

    def sample_without_replacement(self, n, k):
        """``k`` distinct integers from ``[0, n)`` (Floyd's algorithm), in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        chosen = {}
        for j in range(n - k, n):
            t = self.randbelow(j + 1)
            if t in chosen:
                t = j
            chosen[t] = None
        return list(chosen)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def normal(self):
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def uniforms(self, n):
        """``n`` uniforms in [0, 1) as a float64 array."""
        nxt = self.next_u64
        words = np.fromiter((nxt() >> 11 for _ in range(n)), dtype=np.uint64, count=n)
        return words.astype(np.float64) * _TWO_53

    def normals(self, shape, std=1.0):
        """Standard normals scaled by ``std``, same transform as :meth:`normal`."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniforms(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return (z * std).reshape(shape)

    def numpy_generator(self):
        """A numpy ``Generator`` (PCG64) seeded from this stream, for bulk masks."""
        return np.random.Generator(np.random.PCG64(self.next_u64()))
