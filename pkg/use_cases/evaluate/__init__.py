# Evaluation Use Case
import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.interfaces import UseCase
from .metrics import evaluate_dirs


class EvaluateUseCase(UseCase):
    @property
    def name(self) -> str:
        return "eval"

    @property
    def description(self) -> str:
        return "PSNR / MAPE tables of a reconstruction vs. ground truth"

    def configure_parser(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("truth_dir", help="Directory holding truth maps (a simulate data dir)")
        parser.add_argument("recon_dir", help="Directory holding reconstructed maps")
        parser.add_argument("--output", help="Where to write metrics (default: recon_dir)")

    def run(self, args: argparse.Namespace) -> int:
        print("\n" + "=" * 65)
        print("  RECONSTRUCTION METRICS")
        print("=" * 65)
        report = evaluate_dirs(args.truth_dir, args.recon_dir, args.output)
        print(report.to_table())
        print(f"\n  ✅ Metrics written to {args.output or args.recon_dir}")
        return 0
