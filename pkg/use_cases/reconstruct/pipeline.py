"""
Reconstruction Pipeline

Loads a verified acquisition, runs the configured method (BLIP, FINE, C2F,
BLIP+FINE or BLIP+C2F) and writes maps, trace and a run report to
<output_dir>/recon/<method>.
"""

import logging
import os
import sys
from dataclasses import dataclass
from typing import Dict, Optional

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.blip_init import build_dictionary
from core.config import RunConfig
from core.experiment import ReconstructionResult, run_method
from core.optimizer import C2FSchedule
from core.storage import (
    MANIFEST_NAME,
    dump_json,
    load_acquisition,
    save_dictionary,
    save_maps,
    save_trace,
    verify_manifest,
    write_manifest,
)
from core.utils import sha256_file, write_text_atomic
from use_cases.simulate.pipeline import data_dir_for

logger = logging.getLogger(__name__)

RECON_SUBDIR = "recon"
MAPS_NAME = "maps"


@dataclass
class ReconstructionRun:
    """A finished reconstruction and where it was written."""
    output_dir: str
    result: ReconstructionResult
    report: Dict


def method_slug(method: str) -> str:
    return method.lower().replace("+", "_")


def recon_dir_for(config: RunConfig, method: str) -> str:
    return os.path.join(config.resolved_output_dir(), RECON_SUBDIR, method_slug(method))


def run_reconstruction(
    config: RunConfig,
    data_dir: Optional[str] = None,
    output_dir: Optional[str] = None,
    method: Optional[str] = None,
    workers: int = 1,
    keep_dictionary: bool = False,
) -> ReconstructionRun:
    """
    Reconstruct parameter maps from a simulated acquisition.

    Raises:
        DataIntegrityError: If the data directory does not match its manifest.
    """
    method = method or config.method
    data_dir = data_dir or data_dir_for(config)
    verify_manifest(data_dir)
    data = load_acquisition(data_dir)
    output_dir = output_dir or recon_dir_for(config, method)
    os.makedirs(output_dir, exist_ok=True)

    dictionary = None
    files: Dict[str, str] = {}
    if method.startswith("BLIP"):
        t1_grid, t2_grid, omega_grid = config.blip.grids_ms()
        dictionary = build_dictionary(t1_grid, t2_grid, omega_grid, data.schedule,
                                      config.chunk_size, workers)
        if keep_dictionary:
            files.update(save_dictionary(dictionary, output_dir))

    opt = config.optimizer
    logger.info("Reconstructing with %s", method)
    result = run_method(
        method, data,
        initial_guess=config.init.tissue(),
        tau0=opt.tau0.step_sizes(),
        schedule=opt.c2f_schedule() if method.endswith("C2F") else C2FSchedule.fine(opt.fine_iterations),
        fine_iterations=opt.fine_iterations,
        backtrack=opt.backtrack(),
        seed=opt.seed,
        dictionary=dictionary,
        blip_iterations=config.blip.iterations,
        blip_mu=config.blip.mu,
        rho_mode=config.blip.rho_mode,
        true_objective_every=opt.true_objective_every,
        chunk_size=config.chunk_size,
        workers=workers,
    )

    files.update(save_maps(result.maps, output_dir, MAPS_NAME))
    if result.initial_maps is not None and method.startswith("BLIP") and method != "BLIP":
        files.update(save_maps(result.initial_maps, output_dir, "init", previews=False))
    if result.trace.rows:
        files.update(save_trace(result.trace, output_dir))

    report = {
        "name": config.name,
        "method": method,
        "final_true_objective": result.final_objective,
        "iterations": result.trace.iterations,
        "fine_equivalent_cost": str(result.trace.final_cost),
        "objective_evaluations": result.trace.objective_evaluations,
        "refinements": list(result.trace.refinements),
        "data_manifest_sha256": sha256_file(os.path.join(data_dir, MANIFEST_NAME)),
    }
    files["report.json"] = write_text_atomic(os.path.join(output_dir, "report.json"), dump_json(report))
    files["config.json"] = write_text_atomic(os.path.join(output_dir, "config.json"), config.to_json())
    write_manifest(output_dir, files.keys(), extra={"stage": "recon", "method": method})
    return ReconstructionRun(output_dir=output_dir, result=result, report=report)
