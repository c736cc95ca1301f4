"""Single-threaded wall-clock micro-benchmark for the two token mixers.

MAC counts come from the instrumented counter on an untimed forward, so the
record carries the counted cost next to the measured latency. Percentiles are
nearest-rank on the raw per-iteration times.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import Attention, grid_for_tokens
from .errors import ParameterError
from .rng import BENCH_STREAM, RngStream
from .tensor import MacCounter, Tensor

CSV_HEADER = "mixer,n,dim,heads,sr,iters,mean_us,p50_us,p95_us,macs"


@dataclass(frozen=True)
class BenchRecord:
    mixer: str
    n: int
    dim: int
    heads: int
    sr: int
    iters: int
    warmup: int
    mean_us: float
    p50_us: float
    p95_us: float
    macs: int

    def csv_row(self):
        return "%s,%d,%d,%d,%d,%d,%.3f,%.3f,%.3f,%d" % (
            self.mixer, self.n, self.dim, self.heads, self.sr, self.iters,
            self.mean_us, self.p50_us, self.p95_us, self.macs)

    def to_json_dict(self):
        return {"mixer": self.mixer, "n": self.n, "dim": self.dim,
                "heads": self.heads, "sr": self.sr, "iters": self.iters,
                "warmup": self.warmup, "mean_us": self.mean_us,
                "p50_us": self.p50_us, "p95_us": self.p95_us, "macs": self.macs}


def nearest_rank(sorted_values, pct):
    """Nearest-rank percentile of an ascending list."""
    if not sorted_values:
        raise ParameterError("percentile of an empty sample")
    rank = max(math.ceil(pct / 100.0 * len(sorted_values)), 1)
    return sorted_values[rank - 1]


def bench_attention(mixer, n, dim, heads=1, sr=1, iters=10, warmup=2, seed=0):
    """Time one mixer forward; returns a BenchRecord with counted MACs."""
    if mixer not in ("ssa", "mhsa"):
        raise ParameterError("mixer must be ssa or mhsa, got %r" % (mixer,))
    if iters < 1 or warmup < 0:
        raise ParameterError("need iters >= 1 and warmup >= 0")
    rng = RngStream(seed, BENCH_STREAM)
    params = Attention(dim, heads, rng, sr_ratio=sr, squeeze=(mixer == "ssa"))
    x = Tensor(rng.normal((n, dim), dtype=np.float32))
    hw = grid_for_tokens(n, sr)

    with MacCounter() as counter:
        params(x, hw)
    macs = counter.total

    times_us = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            params(x, hw)
        for _ in range(iters):
            start = time.perf_counter_ns()
            params(x, hw)
            times_us.append((time.perf_counter_ns() - start) / 1000.0)

    ordered = sorted(times_us)
    return BenchRecord(mixer=mixer, n=n, dim=dim, heads=heads, sr=sr,
                       iters=iters, warmup=warmup,
                       mean_us=sum(ordered) / len(ordered),
                       p50_us=nearest_rank(ordered, 50),
                       p95_us=nearest_rank(ordered, 95),
                       macs=macs)
