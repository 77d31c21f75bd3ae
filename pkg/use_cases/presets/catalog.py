"""
Preset Catalog

Lists, shows and exports the RunConfig presets shipped in presets/.
"""

import os
import shutil
import sys
from typing import List, Tuple

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.config import RunConfig, list_presets, load_preset, preset_path


def describe_presets() -> List[Tuple[str, RunConfig]]:
    """(name, config) for every preset, each validated on load."""
    return [(name, load_preset(name)) for name in list_presets()]


def summarize(config: RunConfig) -> str:
    opt = config.optimizer
    budget = (opt.c2f_schedule().nominal_budget() if config.method.endswith("C2F")
              else opt.fine_iterations if config.method.endswith("FINE") else 0)
    return (f"{config.method:<10} {config.phantom.size}x{config.phantom.size} "
            f"L={config.schedule.length} rate={config.acquisition.rate:g} budget={budget}")


def write_presets(directory: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    written = []
    for name in list_presets():
        target = os.path.join(directory, f"{name}.json")
        shutil.copyfile(preset_path(name), target)
        written.append(target)
    return written
