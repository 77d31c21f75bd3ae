"""Shared fixtures: tiny schedules, parameter maps and acquisitions."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.bloch_model import FlipSchedule, synth_flip_schedule
from core.experiment import Phantom, simulate_acquisition
from core.mri_operator import AcquisitionData, ParameterMaps


def random_maps(n: int, m: int, seed: int, rho_range=(0.6, 1.1)) -> ParameterMaps:
    """Random tissue-like maps with rho > 0 everywhere."""
    rng = np.random.default_rng(seed)
    return ParameterMaps.from_channels(
        rng.uniform(*rho_range, (n, m)),
        rng.uniform(500.0, 2500.0, (n, m)),
        rng.uniform(50.0, 250.0, (n, m)),
        rng.uniform(-40.0, 40.0, (n, m)),
    )


def random_masks(L: int, n: int, m: int, seed: int, density: float = 0.6) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((L, n, m)) < density


def make_tiny_data(maps: ParameterMaps, sched: FlipSchedule, masks: np.ndarray) -> AcquisitionData:
    return simulate_acquisition(Phantom(maps=maps), sched, masks)


@pytest.fixture
def schedule16() -> FlipSchedule:
    return synth_flip_schedule(16, seed=3)


@pytest.fixture
def truth4() -> ParameterMaps:
    return random_maps(4, 4, seed=11)


@pytest.fixture
def data4(truth4, schedule16) -> AcquisitionData:
    """4x4 noiseless acquisition, L=16, random masks."""
    return make_tiny_data(truth4, schedule16, random_masks(16, 4, 4, seed=5))


@pytest.fixture
def start4(truth4) -> ParameterMaps:
    """A point away from the truth, for non-trivial gradients."""
    rng = np.random.default_rng(17)
    values = truth4.values.copy()
    values[0] *= rng.uniform(0.7, 1.3, values[0].shape)
    values[1] *= rng.uniform(0.7, 1.3, values[1].shape)
    values[2] *= rng.uniform(0.7, 1.3, values[2].shape)
    values[3] += rng.uniform(-5.0, 5.0, values[3].shape)
    return ParameterMaps(values)
