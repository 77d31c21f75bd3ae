"""Tests for the Bloch kernel benchmark and its speedup gate."""

import pytest

from core.errors import NumericalError
from use_cases.benchmark import timing
from use_cases.benchmark.timing import (
    BenchmarkReport,
    IncrementTiming,
    KernelTiming,
    check_speedups,
    run_benchmark,
)


def make_report(medians, voxels=1000, length=64):
    """Report from (increment, derivative median) pairs, speedups relative to the first."""
    reference = medians[0][1]
    rows = [IncrementTiming(
        increment=n, grid_points=length // n,
        values=KernelTiming(median=seconds, spread=0.0),
        derivatives=KernelTiming(median=seconds, spread=0.0),
        speedup_values=1.0, speedup_derivatives=reference / seconds,
    ) for n, seconds in medians]
    return BenchmarkReport(voxels=voxels, length=length, repeats=5,
                           exact=KernelTiming(median=1.0, spread=0.0), rows=rows)


def test_increasing_speedups_pass():
    report = make_report([(1, 1.0), (2, 0.52), (4, 0.27), (8, 0.14), (16, 0.08), (25, 0.05)])
    assert check_speedups(report) == []


def test_slow_second_increment_is_reported():
    # N=2 slower than N=1 while the coarser increments improve
    report = make_report([(1, 1.0), (2, 5.0), (4, 2.4), (8, 1.25), (16, 0.32)])
    violations = check_speedups(report)
    assert len(violations) == 1
    assert "N=1" in violations[0] and "N=2" in violations[0]


def test_flat_speedup_is_a_violation():
    report = make_report([(1, 1.0), (2, 0.5), (4, 0.5)])
    assert len(check_speedups(report)) == 1


def test_gate_raises_on_large_batches(monkeypatch):
    monkeypatch.setattr(timing, "check_speedups", lambda report: ["N=1 -> N=2 not faster"])
    with pytest.raises(NumericalError):
        run_benchmark(voxels=1000, length=4, increments=(1, 2), repeats=1)
    report = run_benchmark(voxels=1000, length=4, increments=(1, 2), repeats=1, enforce=False)
    assert report.warnings == ["N=1 -> N=2 not faster"]


def test_gate_is_advisory_below_the_voxel_threshold(monkeypatch):
    monkeypatch.setattr(timing, "check_speedups", lambda report: ["N=1 -> N=2 not faster"])
    report = run_benchmark(voxels=10, length=4, increments=(1, 2), repeats=1)
    assert report.warnings


def test_speedups_are_relative_to_the_smallest_increment():
    report = run_benchmark(voxels=8, length=16, increments=(4, 2), repeats=1, enforce=False)
    assert [row.increment for row in report.rows] == [2, 4]
    assert report.rows[0].speedup_derivatives == 1.0


@pytest.mark.slow
def test_speedup_grows_with_the_increment_on_1000_voxels():
    report = run_benchmark(voxels=1000, length=500, repeats=5, enforce=False)
    assert [row.increment for row in report.rows] == [1, 2, 4, 8, 16, 25]
    assert report.warnings == []
    by_increment = {row.increment: row for row in report.rows}
    assert by_increment[16].derivatives.median < by_increment[1].derivatives.median
