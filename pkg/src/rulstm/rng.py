"""Seeded pseudo-random generation shared by every stochastic component.

The generator is a counter-based splitmix64: output ``i`` of a stream with
seed ``s`` is ``mix64(s + (i + 1) * GAMMA) mod 2**64`` where ``GAMMA`` is the
64-bit golden-ratio constant 0x9E3779B97F4A7C15 and ``mix64`` is the standard
splitmix64 finalizer (xor-shift / multiply rounds).  The algorithm is fixed
here on purpose: equal seeds produce bit-identical streams on every platform
and library version, which the rest of the package relies on for reproducible
training runs.

Floating-point outputs are derived deterministically from the 64-bit words:
uniforms take the top 53 bits, normals come from paired uniforms via
Box-Muller.  Child generators are derived either positionally (``spawn``) or
by name (``derive``), so components can be reseeded independently of each
other's draw counts.
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MASK = 0xFFFFFFFFFFFFFFFF

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64_scalar(z: int) -> int:
    z &= _MASK
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _fnv1a(name: str) -> int:
    h = _FNV_OFFSET
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


class Rng:
    """Deterministic stream of pseudo-random numbers for one component."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._count = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, drawn={self._count})"

    def _words(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words as a uint64 array."""
        if n < 0:
            raise ValueError(f"cannot draw {n} words")
        base = (self.seed + self._count * _GAMMA) & _MASK
        self._count += n
        z = np.uint64(base) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
        return z

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniform draws in [0, 1) with 53-bit resolution."""
        if shape is None:
            return float(self._words(1)[0] >> np.uint64(11)) * 2.0**-53
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller on uniform pairs."""
        scalar = shape is None
        shape = (1,) if scalar else ((shape,) if isinstance(shape, int) else tuple(shape))
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        w = self._words(2 * pairs)
        # u1 in (0, 1] keeps log() finite; u2 in [0, 1).
        u1 = ((w[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (w[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        if scalar:
            return float(out[0])
        return out[:n].reshape(shape)

    def integer(self, bound: int) -> int:
        """One integer in [0, bound)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return int(self.uniform() * bound)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        u = self.uniform(n)
        for i in range(n - 1, 0, -1):
            j = int(u[i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def mask(self, shape, keep_prob: float) -> np.ndarray:
        """Bernoulli keep-mask: each entry True with probability keep_prob."""
        return self.uniform(shape) < keep_prob

    def spawn(self) -> "Rng":
        """Child generator seeded from the next word of this stream."""
        return Rng(int(self._words(1)[0]))

    def derive(self, name: str) -> "Rng":
        """Named child generator; independent of draws made so far."""
        return Rng(_mix64_scalar((self.seed ^ _fnv1a(name)) + _GAMMA))
