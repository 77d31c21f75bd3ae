# Presets Use Case
import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.config import load_preset
from core.interfaces import UseCase
from .catalog import describe_presets, summarize, write_presets


class PresetsUseCase(UseCase):
    @property
    def name(self) -> str:
        return "presets"

    @property
    def description(self) -> str:
        return "List, show or export the shipped run configurations"

    def configure_parser(self, parser: argparse.ArgumentParser) -> None:
        actions = parser.add_subparsers(dest="action", required=True)
        actions.add_parser("list", help="List presets")
        show = actions.add_parser("show", help="Print one preset as JSON")
        show.add_argument("preset_name")
        write = actions.add_parser("write", help="Copy every preset into a directory")
        write.add_argument("directory")

    def run(self, args: argparse.Namespace) -> int:
        if args.action == "show":
            print(load_preset(args.preset_name).to_json(), end="")
            return 0
        if args.action == "write":
            for path in write_presets(args.directory):
                print(f"  ✅ {path}")
            return 0

        print("\n  Available presets:\n")
        for name, config in describe_presets():
            print(f"  {name:<16} {summarize(config)}")
        return 0
