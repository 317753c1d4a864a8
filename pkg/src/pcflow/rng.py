"""Deterministic random streams.

Every stochastic operation in the toolkit takes an explicit RngState, so
identical seeds plus an identical call sequence reproduce identical outputs
bit for bit.  Substreams are derived through SeedSequence spawn keys, which
keeps parallel work (one stream per shape, per worker, ...) collision-free
and independent of scheduling order.
"""

from __future__ import annotations

import numpy as np


class RngState:
    """A seeded PCG64 stream with spawnable substreams.

    Parameters
    ----------
    seed : int
        64-bit master seed.
    key : tuple of int, optional
        Spawn path relative to the master seed.  ``fork`` extends it.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def fork(self, index) -> "RngState":
        """Derive an independent substream; deterministic in (seed, key, index)."""
        return RngState(self.seed, self.key + (int(index),))

    # -- draws ---------------------------------------------------------------

    def normal(self, shape):
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self.generator.uniform(low, high, shape)

    def integers(self, low, high, shape=None):
        return self.generator.integers(low, high, size=shape)

    def choice_no_replace(self, m, n):
        """n distinct indices drawn uniformly from range(m)."""
        return self.generator.choice(m, size=n, replace=False)

    def permutation(self, n):
        return self.generator.permutation(n)

    # -- checkpointing -------------------------------------------------------

    def state_dict(self):
        """JSON-serializable snapshot of the stream position."""
        st = self.generator.bit_generator.state
        return {
            "seed": self.seed,
            "key": list(self.key),
            "state": int(st["state"]["state"]),
            "inc": int(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state_dict(cls, d) -> "RngState":
        rng = cls(d["seed"], tuple(d["key"]))
        rng.generator.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(d["state"]), "inc": int(d["inc"])},
            "has_uint32": int(d["has_uint32"]),
            "uinteger": int(d["uinteger"]),
        }
        return rng
