"""
Temporal Multiscale qMRI Toolkit

Dictionary-free MR fingerprinting reconstruction with a coarse-to-fine,
temporally multiscale Bloch model: synthetic acquisitions, BLIP
initialization, FINE / C2F projected coordinate descent, metrics and
kernel benchmarks.

Features:
    - Dynamic subcommand loader (Library Architecture)
    - Plug-and-Play Extensibility
    - Reproducible, manifest-checked run directories

Usage:
    python main.py simulate --preset desk
    python main.py recon --preset desk
    python main.py eval runs/desk/data runs/desk/recon/blip_c2f
    python main.py bench --voxels 1000

For more information, see README.md.
"""

import argparse
import logging
import sys
from typing import List, Optional

from core.errors import ToolkitError
from core.interfaces import UseCase
from core.utils import configure_encoding

# Import Librarian
from use_cases import get_available_use_cases

logger = logging.getLogger("qmri")


def show_banner() -> None:
    """Display application banner."""
    print("=" * 70)
    print("  ╔════════════════════════════════════════════════════════════════╗")
    print("  ║        TEMPORAL MULTISCALE qMRI TOOLKIT - C2F / PCDB           ║")
    print("  ╚════════════════════════════════════════════════════════════════╝")
    print("=" * 70)


def show_menu(use_cases: List[UseCase]) -> None:
    """Display the available subcommands."""
    print("\n  Available commands:\n")
    print("  ┌─────────────────────────────────────────────────────────────────┐")

    for i, uc in enumerate(use_cases, 1):
        print(f"  │  {uc.name:<63}│")
        print(f"  │      {uc.description:<59}│")
        if i < len(use_cases):
            print("  ├─────────────────────────────────────────────────────────────────┤")

    print("  └─────────────────────────────────────────────────────────────────┘")
    print("\n  Run 'python main.py <command> --help' for options.\n")


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def build_parser(use_cases: List[UseCase]) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Temporal multiscale qMRI reconstruction toolkit",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    parser.add_argument("--threads", type=int, default=1, help="Worker pool cap (default 1)")

    commands = parser.add_subparsers(dest="command")
    for uc in use_cases:
        sub = commands.add_parser(uc.name, help=uc.description, description=uc.description)
        uc.configure_parser(sub)
        sub.set_defaults(use_case=uc)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point; returns the process exit code."""
    configure_encoding()

    try:
        use_cases = get_available_use_cases()
    except Exception as e:
        print(f"CRITICAL ERROR loading use cases: {e}")
        return 1

    parser = build_parser(use_cases)
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    if args.command is None:
        show_banner()
        show_menu(use_cases)
        return 0
    if args.threads < 1:
        parser.error("--threads must be >= 1")

    try:
        return args.use_case.run(args)
    except ToolkitError as e:
        logger.error("%s: %s", type(e).__name__, e)
        print(f"\n  ❌ {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n  ⚠️  Interrupted.")
        return 130


if __name__ == "__main__":
    sys.exit(main())
