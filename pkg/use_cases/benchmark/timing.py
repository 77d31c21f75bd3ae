"""
Bloch Kernel Benchmark

Times the exact simulator against the multiscale simulator (values only and
with derivatives) over a voxel batch, for a list of grid increments N.
Each timing is the median of several repeats after one warmup call.
"""

import logging
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Sequence

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.bloch_model import simulate_exact_batch, synth_flip_schedule
from core.errors import DomainError, NumericalError
from core.multiscale_bloch import TemporalGrid, TissueBatch, simulate_multiscale_batch
from core.utils import STREAM_PHANTOM, make_rng

logger = logging.getLogger(__name__)

DEFAULT_INCREMENTS = (1, 2, 4, 8, 16, 25)
ASSERT_MIN_VOXELS = 1000


@dataclass
class KernelTiming:
    """Median wall time (s) and relative spread of one kernel."""
    median: float
    spread: float
    samples: List[float] = field(default_factory=list)


@dataclass
class IncrementTiming:
    increment: int
    grid_points: int
    values: KernelTiming
    derivatives: KernelTiming
    speedup_values: float
    speedup_derivatives: float

    @property
    def per_point_values(self) -> float:
        return self.values.median / self.grid_points

    @property
    def per_point_derivatives(self) -> float:
        return self.derivatives.median / self.grid_points


@dataclass
class BenchmarkReport:
    voxels: int
    length: int
    repeats: int
    exact: KernelTiming
    rows: List[IncrementTiming]
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        payload = asdict(self)
        for row, source in zip(payload["rows"], self.rows):
            row["per_point_values"] = source.per_point_values
            row["per_point_derivatives"] = source.per_point_derivatives
        return payload


def time_kernel(func: Callable[[], object], repeats: int) -> KernelTiming:
    """Warm up once, then take the median of `repeats` timed calls."""
    func()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        func()
        samples.append(time.perf_counter() - start)
    median = statistics.median(samples)
    spread = (max(samples) - min(samples)) / median if median > 0 else 0.0
    return KernelTiming(median=median, spread=spread, samples=samples)


def check_speedups(report: BenchmarkReport) -> List[str]:
    """
    Speedup checks on the derivative kernel.

    Returns:
        Human-readable violations: every step up the increment list, N = 1
        included, must raise the speedup with derivatives.
    """
    violations = []
    for previous, current in zip(report.rows, report.rows[1:]):
        if current.speedup_derivatives <= previous.speedup_derivatives:
            violations.append(
                f"speedup with derivatives not increasing: N={previous.increment} "
                f"{previous.speedup_derivatives:.2f}x -> N={current.increment} "
                f"{current.speedup_derivatives:.2f}x")
    return violations


def run_benchmark(
    voxels: int = 1000,
    length: int = 500,
    increments: Sequence[int] = DEFAULT_INCREMENTS,
    repeats: int = 5,
    seed: int = 0,
    enforce: bool = True,
) -> BenchmarkReport:
    """
    Time the Bloch kernels.

    Raises:
        DomainError: For an empty increment list or an increment above L.
        NumericalError: If enforce is set, voxels >= 1000 and check_speedups
            reports a violation.
    """
    increments = sorted(set(int(n) for n in increments))
    if not increments or increments[0] < 1 or increments[-1] > length:
        raise DomainError(f"increments must lie in 1..{length}, got {increments}")

    rng = make_rng(seed, STREAM_PHANTOM)
    tissue = TissueBatch(
        t1=rng.uniform(300.0, 3000.0, voxels),
        t2=rng.uniform(30.0, 300.0, voxels),
        omega=rng.uniform(-50.0, 50.0, voxels),
    )
    sched = synth_flip_schedule(length, seed)

    exact = time_kernel(lambda: simulate_exact_batch(tissue.t1, tissue.t2, tissue.omega, sched), repeats)
    logger.info("exact: %.4fs", exact.median)

    timings = []
    for n in increments:
        grid = TemporalGrid(n, n, length)
        values = time_kernel(lambda: simulate_multiscale_batch(tissue, sched, grid), repeats)
        derivatives = time_kernel(
            lambda: simulate_multiscale_batch(tissue, sched, grid, with_derivatives=True), repeats)
        timings.append((n, grid.size, values, derivatives))
        logger.info("N=%d: values %.4fs, derivatives %.4fs", n, values.median, derivatives.median)

    # speedups with derivatives are relative to the smallest increment (N = 1 by default)
    reference = timings[0][3].median
    rows = [IncrementTiming(
        increment=n, grid_points=size, values=values, derivatives=derivatives,
        speedup_values=exact.median / values.median,
        speedup_derivatives=reference / derivatives.median,
    ) for n, size, values, derivatives in timings]

    report = BenchmarkReport(voxels=voxels, length=length, repeats=repeats, exact=exact, rows=rows)
    report.warnings = check_speedups(report)
    for warning in report.warnings:
        logger.warning(warning)
    if enforce and voxels >= ASSERT_MIN_VOXELS and report.warnings:
        raise NumericalError("benchmark speedup check failed: " + "; ".join(report.warnings), trace=report)
    return report
