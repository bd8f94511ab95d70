"""Counter-based SplitMix64 random stream.

Every random draw in the package goes through :class:`Rng` so that a run is
fully determined by its integer seed, independent of numpy's generator
versioning. The generator is SplitMix64 (Steele, Lea & Flood 2014): the state
is a 64-bit counter advanced by the golden-ratio increment
``0x9E3779B97F4A7C15`` and each output is the xorshift-multiply finalizer

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

applied to the advanced counter. Because output ``k`` only depends on
``state + k * GAMMA`` the draws vectorize in numpy.

Derived conventions (all other ports must follow them to reproduce data):

* ``random``: ``(u64 >> 11) * 2**-53``, in [0, 1).
* ``uniform(lo, hi)``: ``lo + (hi - lo) * random``.
* ``normal``: Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``sqrt(-2 ln(1 - u1)) * (cos(2 pi u2), sin(2 pi u2))``, emitted in that
  order, the spare value of an odd request discarded.
* ``integers(n)``: ``floor(random * n)``.
* ``derive_seed(seed, *keys)``: stream split; folds each key into the seed
  with the finalizer so sibling streams never overlap in practice.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

_GAMMA_U = np.uint64(GAMMA)
_M1_U = np.uint64(_M1)
_M2_U = np.uint64(_M2)


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1_U
    z = (z ^ (z >> np.uint64(27))) * _M2_U
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Split a child seed off ``seed`` for each integer key in turn."""
    h = mix64(seed & MASK64)
    for k in keys:
        h = mix64(h ^ mix64((k + GAMMA) & MASK64))
    return h


class Rng:
    """SplitMix64 stream with vectorized draws.

    The whole generator state is the integer ``state``; copying it forks the
    stream.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def __repr__(self) -> str:
        return f"Rng(state={self.state:#018x})"

    def fork(self) -> "Rng":
        return Rng(self.state)

    def next_u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * _GAMMA_U
            z = np.uint64(self.state) + steps
            out = _mix64_array(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random(self, n: int | None = None):
        """Uniform doubles in [0, 1); scalar when ``n`` is None."""
        k = 1 if n is None else n
        u = (self.next_u64(k) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def uniform(self, low, high, n: int | None = None):
        u = self.random(n)
        return low + (high - low) * u

    def normal(self, n: int | None = None, scale: float = 1.0):
        """Standard normal draws (Box-Muller), multiplied by ``scale``."""
        k = 1 if n is None else n
        pairs = (k + 1) // 2
        u = self.random(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:k] * scale
        return float(z[0]) if n is None else z

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` indices uniform on ``{0, ..., high-1}``."""
        if high < 1:
            raise ValueError("integers() needs high >= 1")
        idx = np.floor(self.random(n) * high).astype(np.int64)
        # random() < 1 so idx <= high - 1, guard the rounding edge anyway
        return np.minimum(idx, high - 1)
