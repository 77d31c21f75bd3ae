# Kernel Benchmark Use Case
import argparse
import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.interfaces import UseCase
from core.utils import write_text_atomic
from .timing import DEFAULT_INCREMENTS, run_benchmark


class BenchmarkUseCase(UseCase):
    @property
    def name(self) -> str:
        return "bench"

    @property
    def description(self) -> str:
        return "Exact vs. multiscale Bloch kernel timings"

    def configure_parser(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--voxels", type=int, default=1000)
        parser.add_argument("--length", type=int, default=500)
        parser.add_argument("--increments", type=lambda s: [int(v) for v in s.split(",")],
                            default=list(DEFAULT_INCREMENTS), help="Comma-separated N values")
        parser.add_argument("--repeats", type=int, default=5)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--json", help="Also write the report as JSON")
        parser.add_argument("--no-assert", action="store_true",
                            help="Report speedup violations without failing")

    def run(self, args: argparse.Namespace) -> int:
        print("\n" + "=" * 65)
        print(f"  BLOCH KERNEL BENCHMARK - {args.voxels} voxels, L={args.length}")
        print("=" * 65)

        report = run_benchmark(args.voxels, args.length, args.increments, args.repeats,
                               args.seed, enforce=not args.no_assert)

        print(f"  Exact simulator: {report.exact.median * 1e3:.1f} ms "
              f"(spread {100 * report.exact.spread:.0f}%)\n")
        print(f"  {'N':>4} │ {'|S|':>5} │ {'VALUES ms':>10} │ {'SPEEDUP':>8} │ "
              f"{'DERIV ms':>10} │ {'SPEEDUP':>8} │ {'DERIV us/pt':>11}")
        print(f"  {'─' * 74}")
        for row in report.rows:
            per_point = row.per_point_derivatives * 1e6
            print(f"  {row.increment:>4} │ {row.grid_points:>5} │ {row.values.median * 1e3:>10.1f} │ "
                  f"{row.speedup_values:>7.2f}x │ {row.derivatives.median * 1e3:>10.1f} │ "
                  f"{row.speedup_derivatives:>7.2f}x │ {per_point:>11.1f}")

        for warning in report.warnings:
            print(f"\n  ⚠️  {warning}")
        if args.json:
            write_text_atomic(args.json, json.dumps(report.to_dict(), indent=2) + "\n")
            print(f"\n  ✅ Report written to {args.json}")
        return 0
