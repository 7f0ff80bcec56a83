"""Counter-based sample tokens.

Every stochastic oracle evaluation is a pure function of (iterate, token),
so the recursive momentum corrections can re-evaluate the exact same sample
at two different iterates bit-identically.  A token is an immutable integer
path; child tokens extend the path, and ``rng()`` maps the path to an
independent Philox stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Steele et al. splitmix64 finalizer; good avalanche, cheap in pure python.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix_path(path: tuple[int, ...]) -> tuple[int, int]:
    """Hash an integer path into a 128-bit Philox key."""
    a, b = 0x243F6A8885A308D3, 0x13198A2E03707344
    for v in path:
        v &= _MASK64
        a = _splitmix64(a ^ v)
        b = _splitmix64((b ^ v) + a)
    return a, b


@dataclass(frozen=True)
class SampleToken:
    """Opaque handle identifying one stochastic sample draw."""

    path: tuple[int, ...]

    @classmethod
    def root(cls, seed: int) -> "SampleToken":
        return cls((int(seed),))

    def child(self, *ids: int) -> "SampleToken":
        return SampleToken(self.path + ids)

    def rng(self) -> np.random.Generator:
        """Fresh generator; identical tokens always yield identical streams."""
        return np.random.Generator(np.random.Philox(key=_mix_path(self.path)))


# Stream tags used when deriving sub-tokens.  Kept in one place so the
# composite upper-level sample and the driver never collide.
STREAM_LOWER = 0       # zeta_t for the lower-level gradient
STREAM_UPPER = 1       # composite xi-bar for the upper-level estimator
STREAM_K_DRAW = 2      # uniform truncation index k(K)
STREAM_XI = 3          # upper-level gradient sample xi (shared by grad_x/grad_y)
STREAM_ZETA = 4        # Hessian samples zeta^(0..K); pair with an index
STREAM_RETURN = 5      # the returned-iterate index a(T)
