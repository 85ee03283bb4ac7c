"""Deterministic random numbers via PCG32.

The generator implements the PCG-XSH-RR 64/32 algorithm bit-for-bit, so
sequences are reproducible across platforms and Python/numpy versions.
Raw 32-bit outputs are produced in blocks with a vectorized state-jump
(the LCG advanced in closed form), which is exactly equivalent to stepping
the scalar recurrence.

Substreams are derived by splitmix64 seed-mixing (`derive_seed`): the k-th
substream of root seed s uses seed ``mix64(s + (k+1)*GOLDEN)``. Derived
streams are used for per-episode resets and per-component training noise.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_MULT = 6364136223846793005
_GOLDEN = 0x9E3779B97F4A7C15

# Block size for vectorized raw-output generation.
_BLOCK = 4096

# _JUMP_A[k] = MULT**k mod 2**64, _JUMP_D[k] = (MULT**(k-1)+...+1) mod 2**64,
# so state_{n+k} = A[k]*state_n + D[k]*inc. Built lazily on first use.
_JUMP_A: np.ndarray | None = None
_JUMP_D: np.ndarray | None = None


def _jump_tables() -> tuple[np.ndarray, np.ndarray]:
    global _JUMP_A, _JUMP_D
    if _JUMP_A is None:
        a = [1]
        d = [0]
        for _ in range(_BLOCK):
            a.append((a[-1] * _MULT) & _MASK64)
            d.append((d[-1] * _MULT + 1) & _MASK64)
        _JUMP_A = np.array(a, dtype=np.uint64)
        _JUMP_D = np.array(d, dtype=np.uint64)
    return _JUMP_A, _JUMP_D


def mix64(x: int) -> int:
    """splitmix64 finalizer; avalanching 64-bit hash."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(root: int, index: int) -> int:
    """Seed for the index-th substream of ``root``.

    Defined as ``mix64(root + (index+1)*GOLDEN)``, i.e. the index-th output
    of a splitmix64 generator seeded with ``root``. Documented so evaluation
    grids (seed x episode) are reproducible from the two integers alone.
    """
    return mix64((root + ((index + 1) * _GOLDEN)) & _MASK64)


class Pcg32:
    """PCG-XSH-RR 64/32 generator with block-buffered output."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        self._inc = ((self.stream << 1) | 1) & _MASK64
        self._state = 0
        self._step_scalar()
        self._state = (self._state + self.seed) & _MASK64
        self._step_scalar()
        self._buf = np.empty(0, dtype=np.uint32)
        self._pos = 0

    def _step_scalar(self) -> int:
        old = self._state
        self._state = (old * _MULT + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def _raw_block(self, n: int) -> np.ndarray:
        """n raw outputs, advancing the state as n scalar steps would."""
        a, d = _jump_tables()
        out = np.empty(n, dtype=np.uint32)
        done = 0
        while done < n:
            m = min(_BLOCK, n - done)
            with np.errstate(over="ignore"):
                states = a[:m] * np.uint64(self._state) + d[:m] * np.uint64(self._inc)
                xs = ((states >> np.uint64(18)) ^ states) >> np.uint64(27)
                xs32 = xs.astype(np.uint32)
                rot = (states >> np.uint64(59)).astype(np.uint32)
                out[done : done + m] = (xs32 >> rot) | (
                    xs32 << ((np.uint32(32) - rot) & np.uint32(31))
                )
            self._state = (
                int(a[m]) * self._state + int(d[m]) * self._inc
            ) & _MASK64
            done += m
        return out

    def _take(self, n: int) -> np.ndarray:
        avail = self._buf.size - self._pos
        if n <= avail:
            out = self._buf[self._pos : self._pos + n]
            self._pos += n
            return out
        parts = [self._buf[self._pos :]]
        need = n - avail
        parts.append(self._raw_block(max(need, _BLOCK) if need < _BLOCK else need))
        joined = np.concatenate(parts) if avail else parts[-1]
        self._buf = joined
        self._pos = n
        return joined[:n]

    # -- draws ---------------------------------------------------------------

    def next_u32(self) -> int:
        return int(self._take(1)[0])

    def uniform(self, size=None):
        """Uniform float64 in [0, 1): raw32 * 2**-32."""
        if size is None:
            return float(self._take(1)[0]) * 2.0**-32
        n = int(np.prod(size))
        return (self._take(n).astype(np.float64) * 2.0**-32).reshape(size)

    def uniform_in(self, lo: float, hi: float, size=None):
        u = self.uniform(size)
        return lo + (hi - lo) * u

    def normal(self, size=None):
        """Standard normals via Box-Muller; two raw draws per pair."""
        scalar = size is None
        n = 1 if scalar else int(np.prod(size))
        pairs = (n + 1) // 2
        raw = self._take(2 * pairs).astype(np.float64)
        # u1 in (0, 1] so log is finite
        u1 = (raw[:pairs] + 1.0) * 2.0**-32
        u2 = raw[pairs:] * 2.0**-32
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if scalar:
            return float(z[0])
        return z.reshape(size)

    def randint(self, bound: int) -> int:
        """Unbiased integer in [0, bound) via threshold rejection."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        threshold = (1 << 32) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self.uniform(size) < p

    def spawn(self, index: int) -> "Pcg32":
        """Independent substream; depends only on (seed, stream, index)."""
        return Pcg32(
            derive_seed(self.seed, index),
            stream=derive_seed(self.stream ^ 0x5851F42D4C957F2D, index) >> 1,
        )

    def __repr__(self) -> str:
        return f"Pcg32(seed={self.seed}, stream={self.stream})"
