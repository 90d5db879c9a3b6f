"""SplitMix64 stream with vectorized draws.

The generator is fully specified so scenes can be reproduced bit-exactly
by other implementations:

* state update: ``state = (state + 0x9E3779B97F4A7C15) mod 2**64``
* output: ``z = state; z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9;
  z = (z ^ z >> 27) * 0x94D049BB133111EB; z ^ z >> 31`` (all mod 2**64)
* uniform double in [0, 1): ``(z >> 11) * 2**-53``
* normal: Box-Muller cosine branch from two consecutive uniforms
  ``u1, u2``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
* child stream ``spawn(key)``: seed ``mix(seed + key * 0xD1B54A32D192ED03)``
  where ``mix`` is the output function above applied to the parent seed.

Vectorized draws of ``n`` values consume exactly ``n`` consecutive outputs,
so ``uniform(3)`` equals three successive ``uniform(1)`` calls.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SPAWN = 0xD1B54A32D192ED03


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    return int(_mix(np.array([value & MASK64], dtype=np.uint64))[0])


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.state = self.seed

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + k * np.uint64(GOLDEN)
            out = _mix(states)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n: int | None = None):
        u = (self.next_u64(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def normal(self, n: int | None = None):
        u = self.uniform(2 * (1 if n is None else n)).reshape(-1, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return float(z[0]) if n is None else z

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in ``[low, high)`` by scaling a uniform draw."""
        u = self.uniform(1 if n is None else n)
        v = low + np.floor(u * (high - low)).astype(np.int64)
        return int(v[0]) if n is None else v

    def spawn(self, key: int) -> "SplitMix64":
        return SplitMix64(mix64(self.seed + key * _SPAWN))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i, ui in zip(range(n - 1, 0, -1), u):
            j = int(ui * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def gamma(self, shape: float, n: int) -> np.ndarray:
        """Gamma(shape, 1) variates by Marsaglia-Tsang, ``shape >= 1``.

        Rejection runs in rounds: every still-pending sample, in index
        order, consumes three uniforms per round (two for the normal, one
        for the acceptance test).
        """
        if shape < 1:
            raise ValueError("shape must be >= 1")
        d = shape - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n)
        pending = np.arange(n)
        while pending.size:
            u = self.uniform(3 * pending.size).reshape(-1, 3)
            x = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
            v = (1.0 + c * x) ** 3
            ok = v > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                accept = ok & (np.log1p(-u[:, 2]) < 0.5 * x * x + d - d * v + d * np.log(np.where(ok, v, 1.0)))
            out[pending[accept]] = d * v[accept]
            pending = pending[~accept]
        return out
