"""Per-patch wall-clock benchmarks of the network stages on the host.

Every measurement times one single-patch call with a monotonic clock. The
first ``warmup`` calls per target are discarded. Targets are measured
round-robin so slow drifts of the host hit all of them alike.
"""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cascade import CascadeConfig, classify_patch_cascade, expected_cost
from .graph import ModelGraph, SplitModel, split_at_exit

TARGETS = ("full-cnn", "full-ee-cnn", "head-only", "cascade")


@dataclass
class BenchStats:
    mean: float
    std: float
    min: float
    max: float
    count: int

    @classmethod
    def from_samples(cls, seconds: Sequence[float]) -> "BenchStats":
        v = np.asarray(seconds, dtype=np.float64) * 1e3
        if not len(v):
            raise ValueError("no timing samples")
        return cls(float(v.mean()), float(v.std()), float(v.min()), float(v.max()), len(v))

    def row(self) -> str:
        return f"{self.mean:.4f} {self.std:.4f} {self.min:.4f} {self.max:.4f}"


@dataclass
class CascadeBench:
    stats: BenchStats
    exit_rate: float
    predicted_mean: float  # expected_cost with the same run's stage means, ms


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


def _runners(g: ModelGraph, split: SplitModel, cfg: CascadeConfig) -> dict[str, Callable[[np.ndarray], object]]:
    from .graph import forward_both

    return {
        "full-cnn": lambda x: g.main_logits(x),
        "full-ee-cnn": lambda x: forward_both(g, x),
        "head-only": lambda x: split.head_forward(x),
        "cascade": lambda x: classify_patch_cascade(split, x, cfg),
    }


def benchmark_all(
    g: ModelGraph,
    patches: np.ndarray,
    n_runs: int = 1000,
    targets: Sequence[str] = TARGETS,
    cfg: CascadeConfig = CascadeConfig(),
    warmup: int = 10,
) -> dict[str, BenchStats | CascadeBench]:
    """Time each target ``n_runs`` times over ``patches`` (cycled), interleaved.

    ``g`` must carry an early exit. Times are reported in milliseconds.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    for t in targets:
        if t not in TARGETS:
            raise ValueError(f"unknown benchmark target {t!r}")
    split = split_at_exit(g)
    runners = _runners(g, split, cfg)
    xs = np.asarray(patches)
    xs = xs.astype(np.float32) / np.float32(255.0) if xs.dtype == np.uint8 else xs.astype(np.float32)
    singles = [xs[i : i + 1] for i in range(len(xs))]
    samples: dict[str, list[float]] = {t: [] for t in targets}
    exits = 0
    clock = time.perf_counter
    with _single_thread():
        for i in range(warmup + n_runs):
            x = singles[i % len(singles)]
            for t in targets:
                fn = runners[t]
                t0 = clock()
                out = fn(x)
                dt = clock() - t0
                if i >= warmup:
                    samples[t].append(dt)
                    if t == "cascade":
                        exits += out.exited_early
    result: dict[str, BenchStats | CascadeBench] = {t: BenchStats.from_samples(samples[t]) for t in targets}
    if "cascade" in targets:
        p_exit = exits / n_runs
        head = result.get("head-only") or _measure(runners["head-only"], singles, n_runs)
        full = result.get("full-ee-cnn") or _measure(runners["full-ee-cnn"], singles, n_runs)
        result["cascade"] = CascadeBench(result["cascade"], p_exit, expected_cost(p_exit, head.mean, full.mean))
    return result


def _measure(fn, singles, n_runs: int) -> BenchStats:
    clock = time.perf_counter
    out = []
    for i in range(n_runs):
        t0 = clock()
        fn(singles[i % len(singles)])
        out.append(clock() - t0)
    return BenchStats.from_samples(out)


def benchmark(
    target: str, g: ModelGraph, patches: np.ndarray, n_runs: int = 1000, cfg: CascadeConfig = CascadeConfig()
) -> BenchStats | CascadeBench:
    """Benchmark a single target; the cascade target also times its two stages."""
    if target == "cascade":
        return benchmark_all(g, patches, n_runs, ("full-ee-cnn", "head-only", "cascade"), cfg)["cascade"]
    return benchmark_all(g, patches, n_runs, (target,), cfg)[target]
