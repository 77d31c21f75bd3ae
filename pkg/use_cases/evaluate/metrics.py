"""
Evaluation of Reconstructed Maps

Compares a reconstruction directory against the ground truth of a data
directory and writes metrics.json / metrics.txt.
"""

import os
import sys
from typing import Optional

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.errors import DataIntegrityError
from core.experiment import MetricsReport, evaluate_maps
from core.mri_operator import ParameterMaps
from core.storage import ACQUISITION_HEADER, load_maps, read_json, save_report

MAP_NAMES = ("maps", "truth")
DEFAULT_PERIOD_HZ = 100.0


def load_any_maps(directory: str, preferred: str) -> ParameterMaps:
    """Load `preferred` maps from directory, falling back to the other known name."""
    for name in (preferred,) + tuple(n for n in MAP_NAMES if n != preferred):
        if os.path.exists(os.path.join(directory, f"{name}.json")):
            return load_maps(directory, name)
    raise DataIntegrityError(f"no parameter maps found in {directory}")


def wrap_period_for(truth_dir: str) -> float:
    """1/TR of the acquisition next to the truth maps, or 100 Hz."""
    header_path = os.path.join(truth_dir, ACQUISITION_HEADER)
    if os.path.exists(header_path):
        return 1000.0 / float(read_json(header_path)["tr_ms"])
    return DEFAULT_PERIOD_HZ


def evaluate_dirs(truth_dir: str, recon_dir: str, output_dir: Optional[str] = None,
                  label: str = "") -> MetricsReport:
    """
    Metrics of recon_dir's maps against truth_dir's ground truth.

    Raises:
        DataIntegrityError: If maps are missing or their shapes differ.
    """
    truth = load_any_maps(truth_dir, "truth")
    recon = load_any_maps(recon_dir, "maps")
    if truth.shape != recon.shape:
        raise DataIntegrityError(f"truth maps are {truth.shape}, recon maps are {recon.shape}")
    report = evaluate_maps(recon, truth, truth.rho > 0, wrap_period_for(truth_dir),
                           label=label or os.path.basename(os.path.normpath(recon_dir)))
    save_report(report, output_dir or recon_dir)
    return report
