"""Counter-based random streams keyed by (seed, stream id).

Philox streams with distinct keys are statistically independent, so init,
dropout, data synthesis and benchmarking each get their own id and never
perturb one another no matter how many draws each consumes.
"""

import numpy as np

from .errors import ParameterError

INIT_STREAM = 0
DROPOUT_STREAM = 1
DATA_STREAM = 2
BENCH_STREAM = 3


class RngStream:
    """Deterministic random source; equal (seed, stream) always replays the same draws."""

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        if self.seed < 0 or self.stream < 0:
            raise ParameterError("seed and stream id must be non-negative")
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def split(self, stream):
        """Fresh stream under the same seed, independent of draws made so far."""
        return RngStream(self.seed, stream)

    def uniform(self, shape, dtype=np.float64):
        return self._gen.random(size=shape, dtype=np.dtype(dtype))

    def normal(self, shape, std=1.0, dtype=np.float32):
        out = self._gen.standard_normal(size=shape, dtype=np.dtype(dtype))
        if std != 1.0:
            out *= std
        return out

    def truncated_normal(self, shape, std=1.0, dtype=np.float32):
        """Normal draw resampled until every value lies within two sigma."""
        dt = np.dtype(dtype)
        out = self._gen.standard_normal(size=shape, dtype=dt)
        flat = out.reshape(-1)
        bad = np.flatnonzero(np.abs(flat) > 2.0)
        while bad.size:
            redraw = self._gen.standard_normal(size=bad.size, dtype=dt)
            flat[bad] = redraw
            bad = bad[np.abs(redraw) > 2.0]
        if std != 1.0:
            out *= std
        return out

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)
