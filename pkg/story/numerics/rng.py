"""
Counter-based random streams.

Each consumer (weight init, diffusion noise, data generation, ...) draws from
its own stream keyed by (seed, stream id), so adding a consumer never shifts
the numbers another one sees. Streams are Philox generators whose 128-bit key
is derived from the seed and stream id with splitmix64.
"""

from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from story.numerics.tensor import default_dtype

MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & MASK64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & MASK64
    return value ^ (value >> 31)


class Stream(IntEnum):
    INIT = 1
    NOISE = 2
    DATA = 3
    TIMESTEP = 4
    DROPOUT = 5
    SAMPLER = 6
    BATCH = 7
    EVAL = 8


class RngStream:
    """Reproducible random stream for one purpose."""

    def __init__(self, seed: int, stream_id: int):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        key = np.array([splitmix64(self.seed), splitmix64(self.stream_id ^ 0xD1B54A32D192ED03)], dtype=np.uint64)
        self._generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id:#x})"

    def child(self, index: int) -> "RngStream":
        """Independent sub-stream, e.g. one per story or per sampled image."""
        return RngStream(self.seed, splitmix64(self.stream_id ^ splitmix64(int(index) & MASK64)))

    def normal(self, shape: Sequence[int], dtype=None) -> np.ndarray:
        dtype = np.dtype(dtype or default_dtype()).type
        return self._generator.standard_normal(tuple(shape), dtype=dtype)

    def uniform(self, shape: Sequence[int] = (), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator.uniform(low, high, size=tuple(shape))

    def random(self) -> float:
        return float(self._generator.random())

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self._generator.integers(low, high, size=size)

    def choice(self, options: Sequence, exclude: Sequence = ()):
        allowed = [option for option in options if option not in exclude]
        return allowed[int(self._generator.integers(0, len(allowed)))]

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)
