"""Deterministic random streams.

Two kinds of streams are used across the simulator:

* Per-trial numpy generators built on the Philox counter-based bit
  generator, keyed by (master seed, trial id). Trials can therefore run
  in any order (or in parallel) and still reproduce byte-identical
  outputs.

* A portable 64-bit counter stream (splitmix64) for Gumbel noise, so
  that any other implementation of the weight format can replicate
  categorical relaxation draws exactly. The protocol is:

      state_k   = splitmix64(key + k)          k = 0, 1, 2, ...
      u_k       = (state_k >> 11) * 2^-53      uniform in [0, 1)
      gumbel_k  = -ln(-ln(max(u_k, 2^-53)))

  with splitmix64 the standard finalizer: add 0x9E3779B97F4A7C15, then
  xor-shift/multiply with 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def trial_rng(master_seed: int, trial_id: int) -> np.random.Generator:
    """Independent generator for one trial, keyed on (seed, trial)."""
    return np.random.Generator(np.random.Philox(key=[master_seed & _MASK64, trial_id & _MASK64]))


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class CounterRng:
    """Portable counter-based uniform/Gumbel stream (splitmix64)."""

    def __init__(self, key: int = 0):
        self.key = key & _MASK64
        self.counter = 0

    def uniform(self, n: int) -> np.ndarray:
        """Next n uniforms in [2^-53, 1)."""
        out = np.empty(n)
        for i in range(n):
            z = _splitmix64((self.key + self.counter) & _MASK64)
            self.counter += 1
            out[i] = max((z >> 11) * 2.0 ** -53, 2.0 ** -53)
        return out

    def gumbel(self, n: int) -> np.ndarray:
        """Next n standard Gumbel variates via inverse CDF."""
        return -np.log(-np.log(self.uniform(n)))
