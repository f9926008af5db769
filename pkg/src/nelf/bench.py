"""Forward-pass latency measurement with controlled BLAS threading."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .network import Model
from .tensor import Tensor4, no_grad


@dataclass(frozen=True)
class BenchResult:
    height: int
    width: int
    out_height: int
    out_width: int
    n_iters: int
    warmup: int
    mean_ms: float
    p50_ms: float
    p95_ms: float

    def to_dict(self) -> dict:
        return {
            "input": [self.height, self.width],
            "output": [self.out_height, self.out_width],
            "n_iters": self.n_iters,
            "warmup": self.warmup,
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
        }


def benchmark_forward(
    model: Model,
    height: int,
    width: int,
    n_iters: int = 20,
    warmup: int = 3,
    threads: Optional[int] = 1,
    seed: int = 0,
) -> BenchResult:
    """Time eval-mode forwards on one random input; warmup runs are discarded."""
    if n_iters < 1 or warmup < 0:
        raise ValueError("need n_iters >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    x = Tensor4(
        rng.standard_normal((1, model.config.in_channels, height, width)).astype(np.float32)
    )
    samples: List[float] = []
    with threadpool_limits(limits=threads):
        with no_grad():
            for _ in range(warmup):
                model.forward(x, mode="eval")
            for _ in range(n_iters):
                t0 = time.perf_counter()
                out = model.forward(x, mode="eval")
                samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(samples)
    return BenchResult(
        height=height,
        width=width,
        out_height=out.shape[2],
        out_width=out.shape[3],
        n_iters=n_iters,
        warmup=warmup,
        mean_ms=float(arr.mean()),
        p50_ms=float(np.percentile(arr, 50)),
        p95_ms=float(np.percentile(arr, 95)),
    )
