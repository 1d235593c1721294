"""Counter-based random streams.

A stream is fully described by (seed, stream_id, counter): every draw call
spins up a fresh Philox generator keyed on (seed, stream_id), advanced to a
block derived from the call counter. Replaying a stream from the same triple
reproduces the same values, and distinct stream_ids never collide.

Gaussians come from Box-Muller on the stream's uniforms rather than the
generator's native normals, so the sequence of values is pinned down by this
module alone.
"""

from __future__ import annotations

import numpy as np

# Each draw call owns 2**64 Philox 128-bit blocks; no realistic single call
# consumes that many.
_BLOCKS_PER_CALL = 1 << 64


class RngStream:
    """Deterministic, forkable random stream."""

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def child(self, stream_id: int) -> "RngStream":
        """Independent stream under the same seed (e.g. one per worker)."""
        return RngStream(self.seed, stream_id)

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream_id, self.counter)

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=[self.seed, self.stream_id])
        bitgen.advance(self.counter * _BLOCKS_PER_CALL)
        self.counter += 1
        return np.random.Generator(bitgen)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        g = self._generator()
        return g.random(shape, dtype=np.float64) * (high - low) + low

    def gaussian(self, shape=(), sigma: float = 1.0) -> np.ndarray:
        """Box-Muller N(0, sigma^2) draws."""
        n = int(np.prod(shape)) if shape else 1
        g = self._generator()
        half = (n + 1) // 2
        # u1 in (0, 1] so the log is finite.
        u1 = 1.0 - g.random(half, dtype=np.float64)
        u2 = g.random(half, dtype=np.float64)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        out = (sigma * z).reshape(shape)
        return out if shape else float(out)

    def bernoulli(self, shape, p: float) -> np.ndarray:
        return (self.uniform(shape) < p).astype(np.float64)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        g = self._generator()
        return g.integers(low, high, size=shape if shape else None)

    def permutation(self, n: int) -> np.ndarray:
        g = self._generator()
        return g.permutation(n)
