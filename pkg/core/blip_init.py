"""
Dictionary Matching and BLIP Initialization

A coarse dictionary of exact Bloch responses over a (T1, T2, omega) grid,
template matching of voxel time series against it, and the BLIP iteration:
a Landweber data-consistency step on the image time series followed by
per-voxel projection onto the best-matching scaled atom.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .bloch_model import FlipSchedule, simulate_exact_batch, transverse
from .errors import DomainError, NumericalError
from .mri_operator import AcquisitionData, ParameterMaps, fourier_2d, inverse_fourier_2d
from .utils import DEFAULT_CHUNK_SIZE, map_voxel_chunks

logger = logging.getLogger(__name__)

# Coarse discretization (ms, ms, Hz): 12 x 12 x 11 = 1584 atoms.
DEFAULT_T1_GRID = 500.0 * np.arange(1, 13)
DEFAULT_T2_GRID = 50.0 * np.arange(1, 13)
DEFAULT_OMEGA_GRID = 10.0 * np.arange(-5, 6)

RHO_MODES = ("real", "modulus")
DIVERGENCE_FACTOR = 10.0


@dataclass
class Dictionary:
    """
    Exact transverse Bloch responses over a parameter grid.

    Attributes:
        atoms: Complex signatures, shape (A, L).
        params: (T1, T2, omega) of every atom, shape (A, 3); T1 varies
            slowest and omega fastest.
        norms: Euclidean norm of every atom, shape (A,).
        t1_grid, t2_grid, omega_grid: The grids the atoms were built from.
        tr: Repetition time of the schedule (ms).
    """
    atoms: np.ndarray
    params: np.ndarray
    norms: np.ndarray
    t1_grid: np.ndarray
    t2_grid: np.ndarray
    omega_grid: np.ndarray
    tr: float

    @property
    def size(self) -> int:
        return int(self.atoms.shape[0])

    @property
    def length(self) -> int:
        return int(self.atoms.shape[1])


def build_dictionary(
    t1_grid: Sequence[float] = DEFAULT_T1_GRID,
    t2_grid: Sequence[float] = DEFAULT_T2_GRID,
    omega_grid: Sequence[float] = DEFAULT_OMEGA_GRID,
    sched: Optional[FlipSchedule] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> Dictionary:
    """
    Simulate one atom per grid point with the exact simulator.

    Duplicate grid values are kept as duplicate atoms.

    Raises:
        DomainError: On empty grids, non-positive T1/T2 values, or an atom
            with zero norm.
    """
    if sched is None:
        raise DomainError("build_dictionary needs a flip schedule")
    grids = [np.asarray(g, dtype=np.float64).reshape(-1) for g in (t1_grid, t2_grid, omega_grid)]
    if any(g.size == 0 for g in grids):
        raise DomainError("dictionary grids must be non-empty")
    if np.any(grids[0] <= 0) or np.any(grids[1] <= 0):
        raise DomainError("dictionary T1/T2 grids must be positive")

    mesh = np.meshgrid(*grids, indexing="ij")
    params = np.stack([g.reshape(-1) for g in mesh], axis=-1)

    def simulate(chunk: slice) -> np.ndarray:
        p = params[chunk]
        return transverse(simulate_exact_batch(p[:, 0], p[:, 1], p[:, 2], sched))

    atoms = np.concatenate(map_voxel_chunks(simulate, params.shape[0], chunk_size, workers), axis=0)
    norms = np.linalg.norm(atoms, axis=1)
    if np.any(norms <= 0):
        raise DomainError("dictionary contains an all-zero atom; check the flip schedule")
    logger.info("Built dictionary: %d atoms x %d frames", atoms.shape[0], atoms.shape[1])
    return Dictionary(atoms=atoms, params=params, norms=norms,
                      t1_grid=grids[0], t2_grid=grids[1], omega_grid=grids[2], tr=sched.tr)


def match_signals(
    signals: np.ndarray,
    dictionary: Dictionary,
    rho_mode: str = "real",
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Match a batch of signals against the dictionary.

    Args:
        signals: Complex time series, shape (P, L).
        dictionary: The dictionary.
        rho_mode: "real" for Re<d, s>/||d||^2 clamped at 0, "modulus" for |<d, s>|/||d||^2.

    Returns:
        (atom indices (P,), rho estimates (P,)). Ties go to the lowest index.
    """
    if rho_mode not in RHO_MODES:
        raise DomainError(f"rho_mode must be one of {RHO_MODES}, got {rho_mode!r}")
    if dictionary.size == 0:
        raise DomainError("cannot match against an empty dictionary")
    signals = np.atleast_2d(np.asarray(signals, dtype=np.complex128))
    if signals.shape[1] != dictionary.length:
        raise DomainError(
            f"signals have {signals.shape[1]} frames but the atoms have {dictionary.length}")

    correlations = signals @ np.conj(dictionary.atoms).T
    scores = np.abs(correlations) / dictionary.norms
    best = np.argmax(scores, axis=1)
    picked = correlations[np.arange(signals.shape[0]), best]
    energy = dictionary.norms[best] ** 2
    if rho_mode == "real":
        rho = np.maximum(picked.real / energy, 0.0)
    else:
        rho = np.abs(picked) / energy
    return best, rho


def match_voxel(signal: np.ndarray, dictionary: Dictionary, rho_mode: str = "real") -> Tuple[np.ndarray, float]:
    """
    Best-matching atom of one signal.

    Returns:
        ((T1, T2, omega) of the atom, rho estimate). An all-zero signal
        returns the first atom with rho = 0.
    """
    index, rho = match_signals(np.asarray(signal)[None, :], dictionary, rho_mode)
    return dictionary.params[index[0]].copy(), float(rho[0])


def project_onto_dictionary(
    series: np.ndarray,
    dictionary: Dictionary,
    rho_mode: str = "real",
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Replace every voxel's time series by its best-matching scaled atom.

    Args:
        series: Image time series, shape (L, n, m).

    Returns:
        (projected series (L, n, m), atom indices (n*m,), rho (n*m,)).
    """
    length, n, m = series.shape
    signals = series.reshape(length, n * m).T

    def match(chunk: slice):
        return match_signals(signals[chunk], dictionary, rho_mode)

    parts = map_voxel_chunks(match, n * m, chunk_size, workers)
    indices = np.concatenate([p[0] for p in parts])
    rho = np.concatenate([p[1] for p in parts])
    projected = (rho[:, None] * dictionary.atoms[indices]).T.reshape(length, n, m)
    return projected, indices, rho


def maps_from_matches(indices: np.ndarray, rho: np.ndarray, dictionary: Dictionary,
                      shape: Tuple[int, int]) -> ParameterMaps:
    params = dictionary.params[indices]
    n, m = shape
    return ParameterMaps.from_channels(
        rho.reshape(n, m), params[:, 0].reshape(n, m),
        params[:, 1].reshape(n, m), params[:, 2].reshape(n, m))


def blip_reconstruct(
    data: AcquisitionData,
    dictionary: Dictionary,
    iters: int = 50,
    mu: float = 1.0,
    rho_mode: str = "real",
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> ParameterMaps:
    """
    BLIP: X <- project(X + mu * A^*(y - A X)), repeated `iters` times.

    A applies the masked unitary Fourier transform frame by frame.

    Raises:
        DomainError: If iters < 1, mu <= 0 or the dictionary length differs from L.
        NumericalError: If the data residual grows beyond 10x its initial value.
    """
    if iters < 1:
        raise DomainError(f"BLIP needs iters >= 1, got {iters}")
    if not mu > 0:
        raise DomainError(f"BLIP step mu must be positive, got {mu}")
    if dictionary.length != data.length:
        raise DomainError(
            f"dictionary atoms have {dictionary.length} frames, data has {data.length}")

    y = data.frames
    series = np.zeros_like(y)
    initial = float(np.linalg.norm(y))
    indices = np.zeros(data.shape[0] * data.shape[1], dtype=np.int64)
    rho = np.zeros(indices.shape[0])

    for it in range(1, iters + 1):
        residual = y - np.where(data.masks, fourier_2d(series, workers=workers), 0.0)
        norm = float(np.linalg.norm(residual))
        if initial > 0 and norm > DIVERGENCE_FACTOR * initial:
            raise NumericalError(
                f"BLIP diverged at iteration {it}: residual {norm:.4e} vs initial {initial:.4e}")
        series = series + mu * inverse_fourier_2d(np.where(data.masks, residual, 0.0), workers=workers)
        series, indices, rho = project_onto_dictionary(series, dictionary, rho_mode, chunk_size, workers)
        logger.debug("BLIP iter %d: residual %.6e", it, norm)

    logger.info("BLIP finished after %d iterations", iters)
    return maps_from_matches(indices, rho, dictionary, data.shape)
