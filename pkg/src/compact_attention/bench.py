"""Timing and operation-count comparison of compact vs pixel-wise attention."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from threadpoolctl import threadpool_limits

from .attention import AttentionConfig, aggregate, compact_attention, pixelwise_attention
from .tensor import flatten_pixels, random_fill

CSV_COLUMNS = ("method", "m", "c", "h", "w", "p", "s", "median_seconds", "flops_estimate")
METHODS = ("compact", "pixelwise")


@dataclass(frozen=True)
class BenchCase:
    m: int = 4
    c: int = 64
    h: int = 16
    w: int = 16
    p: int = 32
    s: int = 3
    repeats: int = 5
    seed: int = 42

    def __post_init__(self):
        if self.repeats < 3:
            raise ValueError(f"repeats must be at least 3, got {self.repeats}")
        for name in ("m", "c", "h", "w", "p", "s"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


def flop_breakdown(method: str, case: BenchCase) -> dict[str, int]:
    """Operation counts per stage: one per matmul multiply-add, one per softmax exp.

    These are the counts :func:`compact_attention.tensor.count_ops` records
    for a forward pass.
    """
    hw = case.h * case.w
    hmw = case.m * hw
    c, p, s = case.c, case.p, case.s
    if method == "pixelwise":
        return {"matmul": 2 * hw * hmw * c, "softmax": hw * hmw}
    if method == "compact":
        return {
            # s update rounds of two products each, plus the final map
            "extract_matmul": (2 * s + 1) * hmw * p * c,
            "extract_softmax": (s + 1) * hmw * p,
            "appearance_matmul": hmw * p * c,
            "aggregate_matmul": 2 * hw * p * c,
            "aggregate_softmax": hw * p,
        }
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def flop_estimate(method: str, case: BenchCase) -> int:
    return sum(flop_breakdown(method, case).values())


def make_inputs(case: BenchCase):
    """Random x_in, x_a, x_l for a case; depends only on the seed and extents."""
    x_in = random_fill((case.c, case.h, case.w), case.seed)
    x_a = random_fill((case.m, case.c, case.h, case.w), case.seed + 1)
    x_l = random_fill((case.m, case.c, case.h, case.w), case.seed + 2)
    return x_in, x_a, x_l


def time_call(
    fn: Callable[[], object], repeats: int, min_seconds: float = 2e-2, max_spread: float = 0.3, attempts: int = 3
) -> list[float]:
    """Per-call wall times, one per repeat, after a discarded warm-up call.

    Each repeat loops ``fn`` enough times to last at least ``min_seconds`` so
    fast kernels are not dominated by clock jitter. A batch whose interquartile
    spread exceeds ``max_spread`` of the median is re-measured, up to
    ``attempts`` times; the tightest batch is returned.
    """
    t0 = time.perf_counter_ns()
    fn()
    once = max(time.perf_counter_ns() - t0, 1) / 1e9
    number = max(1, int(min_seconds / once))
    best = None
    for _ in range(attempts):
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            for _ in range(number):
                fn()
            samples.append((time.perf_counter_ns() - t0) / 1e9 / number)
        if best is None or relative_spread(samples) < relative_spread(best):
            best = samples
        if relative_spread(best) < max_spread:
            break
    return best


def relative_spread(samples: Sequence[float]) -> float:
    q1, _, q3 = statistics.quantiles(samples, n=4)
    return (q3 - q1) / statistics.median(samples)


@dataclass
class BenchRow:
    method: str
    case: BenchCase
    median_seconds: float
    flops_estimate: int
    samples: list[float] = field(default_factory=list)


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)
    # median seconds of the aggregation stage alone, keyed by m
    aggregate_seconds: dict[int, float] = field(default_factory=dict)

    def median(self, method: str, m: int) -> float:
        return next(r.median_seconds for r in self.rows if r.method == method and r.case.m == m)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            k = r.case
            writer.writerow([r.method, k.m, k.c, k.h, k.w, k.p, k.s, f"{r.median_seconds:.9f}", r.flops_estimate])
        return buf.getvalue()


def run_sweep(base: BenchCase, m_values: Sequence[int], min_seconds: float = 2e-2) -> BenchResult:
    """Time both methods for each reference count, single-threaded."""
    result = BenchResult()
    with threadpool_limits(limits=1):
        for m in m_values:
            case = replace(base, m=int(m))
            x_in, x_a, x_l = make_inputs(case)
            cfg = AttentionConfig(p=case.p, s=case.s, seed=case.seed)

            samples = time_call(lambda: compact_attention(x_in, x_a, x_l, cfg), case.repeats, min_seconds)
            result.rows.append(BenchRow("compact", case, statistics.median(samples), flop_estimate("compact", case), samples))

            out = compact_attention(x_in, x_a, x_l, cfg)
            flat_in = flatten_pixels(x_in)
            agg = time_call(lambda: aggregate(flat_in, out.b_l, out.b_a), case.repeats, min_seconds)
            result.aggregate_seconds[case.m] = statistics.median(agg)

            samples = time_call(lambda: pixelwise_attention(x_in, x_a, x_l), case.repeats, min_seconds)
            result.rows.append(BenchRow("pixelwise", case, statistics.median(samples), flop_estimate("pixelwise", case), samples))
    return result
