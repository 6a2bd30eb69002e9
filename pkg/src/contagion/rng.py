"""Counter-based random substreams.

Every stochastic quantity is drawn from a Philox stream whose 128-bit key is
built from ``(seed, path index, stream id)``.  A path therefore sees the same
numbers no matter which worker simulates it or in which order paths run.
"""
from __future__ import annotations

import numpy as np

THINNING = 0
MARKS = 1
DIFFUSION = 2
_N_STREAMS = 4

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, path: int, stream: int) -> np.ndarray:
    if not 0 <= stream < _N_STREAMS:
        raise ValueError(f"unknown stream id {stream}")
    if path < 0:
        raise ValueError("path index must be non-negative")
    return np.array([int(seed) & _MASK64, (path * _N_STREAMS + stream) & _MASK64], dtype=np.uint64)


def substream(seed: int, path: int, stream: int) -> np.random.Generator:
    """Fresh generator for one (seed, path, stream) triple."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, path, stream)))


class StreamFactory:
    """Re-keys a single Philox bit generator instead of allocating a new one.

    Cheaper than :func:`substream` inside tight per-path loops.  Not thread
    safe: give each worker its own factory.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bitgen = np.random.Philox(key=stream_key(self.seed, 0, 0))
        self._gen = np.random.Generator(self._bitgen)
        self._zeros = np.zeros(4, dtype=np.uint64)

    def generator(self, path: int, stream: int) -> np.random.Generator:
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": self._zeros.copy(), "key": stream_key(self.seed, path, stream)},
            "buffer": self._zeros.copy(),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        return self._gen
