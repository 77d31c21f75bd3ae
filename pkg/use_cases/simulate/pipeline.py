"""
Acquisition Simulation Pipeline

Builds the phantom, flip schedule, EPI masks and k-space data a RunConfig
describes and writes them, with a SHA-256 manifest, to <output_dir>/data.
"""

import logging
import os
import sys
from dataclasses import dataclass
from typing import Dict

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from core.config import RunConfig
from core.experiment import Phantom, make_epi_masks, make_phantom, simulate_acquisition
from core.mri_operator import AcquisitionData
from core.storage import save_acquisition, save_maps, write_manifest
from core.utils import write_text_atomic

logger = logging.getLogger(__name__)

DATA_SUBDIR = "data"
TRUTH_NAME = "truth"


@dataclass
class SimulationResult:
    """What cmd_simulate produced."""
    data_dir: str
    phantom: Phantom
    data: AcquisitionData
    files: Dict[str, str]


def data_dir_for(config: RunConfig) -> str:
    return os.path.join(config.resolved_output_dir(), DATA_SUBDIR)


def run_simulation(config: RunConfig, workers: int = 1) -> SimulationResult:
    """
    Simulate the acquisition of a RunConfig and persist every artifact.

    Returns:
        SimulationResult with the data directory and the in-memory objects.
    """
    directory = data_dir_for(config)
    os.makedirs(directory, exist_ok=True)

    phantom = make_phantom(config.phantom.size, config.phantom.kind, config.phantom.seed)
    schedule = config.schedule.build()
    n, m = phantom.shape
    masks = make_epi_masks(n, m, config.acquisition.rate, schedule.length, config.acquisition.seed)
    logger.info("Simulating %dx%d phantom over L=%d frames", n, m, schedule.length)
    data = simulate_acquisition(
        phantom, schedule, masks,
        noise_sigma=config.acquisition.noise_sigma,
        seed=config.acquisition.seed,
        rate=config.acquisition.rate,
        chunk_size=config.chunk_size,
        workers=workers,
    )

    files: Dict[str, str] = {}
    files.update(save_maps(phantom.maps, directory, TRUTH_NAME))
    files.update(save_acquisition(data, directory, extra={
        "phantom_kind": phantom.kind,
        "phantom_seed": phantom.seed,
        "noise_sigma": config.acquisition.noise_sigma,
    }))
    files["config.json"] = write_text_atomic(os.path.join(directory, "config.json"), config.to_json())
    write_manifest(directory, files.keys(), extra={"stage": "simulate", "name": config.name})
    return SimulationResult(data_dir=directory, phantom=phantom, data=data, files=files)
