"""
Exact IR-bSSFP Bloch Simulation

This module implements the fine-scale (one step per repetition) Bloch
recursion m_l = A_l m_{l-1} + b that every other part of the toolkit is
validated against. It is also the engine for data simulation and dictionary
generation.

Conventions:
    - T1, T2 and TR are in milliseconds, off-resonance omega in Hz.
    - e1 = exp(-TR/T2) (transverse), e2 = exp(-TR/T1) (longitudinal),
      E = diag(e1, e1, e2).
    - R_alpha rotates about the x-axis:
      [[1, 0, 0], [0, cos a, sin a], [0, -sin a, cos a]].
    - V_omega rotates about the z-axis by phi = 2*pi*omega*TR (TR in seconds),
      so responses are exactly periodic in omega with period 1/TR.
    - Inversion is carried by the initial state m_0 = -m_e = (0, 0, -1).

Every kernel broadcasts over a leading voxel axis so a batch of voxels is
advanced with one set of array operations.
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .errors import DomainError
from .utils import STREAM_PHANTOM, make_rng, write_text_atomic

ArrayLike = Union[float, np.ndarray]

# Magnetization states are plain float64 3-vectors (batched: (..., 3)).
MagState = np.ndarray

M_EQUILIBRIUM: np.ndarray = np.array([0.0, 0.0, 1.0])
M_INITIAL: np.ndarray = -M_EQUILIBRIUM

# Seconds per millisecond, used when forming the off-resonance phase.
MS_TO_S = 1e-3


@dataclass(frozen=True)
class TissueParams:
    """
    Tissue parameters of a single voxel.

    Attributes:
        rho: Proton density (a.u.), >= 0.
        t1: Longitudinal relaxation time (ms), > 0.
        t2: Transverse relaxation time (ms), > 0.
        omega: Off-resonance frequency (Hz).
    """
    rho: float
    t1: float
    t2: float
    omega: float = 0.0

    def __post_init__(self):
        if not (self.t1 > 0 and self.t2 > 0):
            raise DomainError(f"T1 and T2 must be positive, got T1={self.t1}, T2={self.t2}")
        if not self.rho >= 0:
            raise DomainError(f"rho must be non-negative, got {self.rho}")


@dataclass(frozen=True)
class FlipSchedule:
    """
    Flip-angle sequence of an IR-bSSFP acquisition.

    Attributes:
        angles: L flip angles in radians.
        tr: Repetition time (ms).
    """
    angles: np.ndarray
    tr: float = 10.0

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if angles.size < 1:
            raise DomainError("a flip schedule needs at least one angle")
        if not np.all(np.isfinite(angles)):
            raise DomainError("flip angles must be finite")
        if not self.tr > 0:
            raise DomainError(f"TR must be positive, got {self.tr}")
        object.__setattr__(self, "angles", angles)

    @property
    def length(self) -> int:
        return int(self.angles.size)

    @property
    def angles_deg(self) -> np.ndarray:
        return np.degrees(self.angles)

    @property
    def omega_period(self) -> float:
        """Off-resonance period 1/TR in Hz."""
        return 1.0 / (self.tr * MS_TO_S)

    def to_csv(self) -> str:
        """Serialize the angles as CSV (header 'alpha_deg', one angle per line)."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["alpha_deg"])
        for value in self.angles_deg:
            writer.writerow([repr(float(value))])
        return buffer.getvalue()

    def save(self, csv_path: str) -> None:
        """Write the CSV plus a JSON sidecar holding TR."""
        write_text_atomic(csv_path, self.to_csv())
        sidecar = {"tr_ms": self.tr, "length": self.length, "units": "degrees"}
        write_text_atomic(_sidecar_path(csv_path), json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, csv_path: str, tr: float = None) -> "FlipSchedule":
        """
        Load a schedule from CSV.

        Args:
            csv_path: Path to the CSV file (header 'alpha_deg').
            tr: Repetition time (ms). If omitted, read from the JSON sidecar.
        """
        with open(csv_path, "r", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0] != ["alpha_deg"]:
            raise DomainError(f"{csv_path}: expected header 'alpha_deg'")
        degrees = [float(row[0]) for row in rows[1:] if row]
        if tr is None:
            with open(_sidecar_path(csv_path), "r", encoding="utf-8") as f:
                tr = float(json.load(f)["tr_ms"])
        return cls(angles=np.radians(degrees), tr=tr)


def _sidecar_path(csv_path: str) -> str:
    base = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return base + ".json"


def relaxation_factors(t1: ArrayLike, t2: ArrayLike, tr: float) -> Tuple[ArrayLike, ArrayLike]:
    """
    Per-repetition relaxation factors.

    Args:
        t1: Longitudinal relaxation time(s) in ms.
        t2: Transverse relaxation time(s) in ms.
        tr: Repetition time in ms.

    Returns:
        (e1, e2) with e1 = exp(-tr/t2) and e2 = exp(-tr/t1), both in (0, 1).

    Raises:
        DomainError: If any input is not strictly positive.
    """
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    if not (np.all(t1 > 0) and np.all(t2 > 0) and tr > 0):
        raise DomainError("relaxation times and TR must be strictly positive")
    e1 = np.exp(-tr / t2)
    e2 = np.exp(-tr / t1)
    if e1.ndim == 0:
        return float(e1), float(e2)
    return e1, e2


def rotation_x(angle: ArrayLike) -> np.ndarray:
    """Excitation rotation R_alpha about the x-axis, shape (..., 3, 3)."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    one, zero = np.ones_like(angle), np.zeros_like(angle)
    return np.stack([
        np.stack([one, zero, zero], axis=-1),
        np.stack([zero, c, s], axis=-1),
        np.stack([zero, -s, c], axis=-1),
    ], axis=-2)


def rotation_z(phi: ArrayLike) -> np.ndarray:
    """Precession rotation V about the z-axis, shape (..., 3, 3)."""
    phi = np.asarray(phi, dtype=np.float64)
    c, s = np.cos(phi), np.sin(phi)
    one, zero = np.ones_like(phi), np.zeros_like(phi)
    return np.stack([
        np.stack([c, s, zero], axis=-1),
        np.stack([-s, c, zero], axis=-1),
        np.stack([zero, zero, one], axis=-1),
    ], axis=-2)


def rotation_z_derivative(phi: ArrayLike) -> np.ndarray:
    """d/dphi of rotation_z, shape (..., 3, 3)."""
    phi = np.asarray(phi, dtype=np.float64)
    c, s = np.cos(phi), np.sin(phi)
    zero = np.zeros_like(phi)
    return np.stack([
        np.stack([-s, c, zero], axis=-1),
        np.stack([-c, -s, zero], axis=-1),
        np.stack([zero, zero, zero], axis=-1),
    ], axis=-2)


def precession_phase(omega: ArrayLike, tr: float) -> ArrayLike:
    """phi = 2*pi*omega*TR with TR converted to seconds (radians)."""
    return 2.0 * math.pi * np.asarray(omega, dtype=np.float64) * tr * MS_TO_S


def phase_rate(tr: float) -> float:
    """d(phi)/d(omega) in rad/Hz."""
    return 2.0 * math.pi * tr * MS_TO_S


def relaxation_matrix(e1: ArrayLike, e2: ArrayLike) -> np.ndarray:
    """E = diag(e1, e1, e2), shape (..., 3, 3)."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    diag = np.stack([e1, e1, e2], axis=-1)
    return diag[..., :, None] * np.eye(3)


def recharge_vector(e2: ArrayLike) -> np.ndarray:
    """b = (1 - e2) m_e, shape (..., 3)."""
    e2 = np.asarray(e2, dtype=np.float64)
    return (1.0 - e2)[..., None] * M_EQUILIBRIUM


def transition_matrix(
    angle: ArrayLike,
    omega: ArrayLike,
    t1: ArrayLike,
    t2: ArrayLike,
    tr: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-repetition affine Bloch map m -> A m + b.

    A = E V_omega R_alpha V_omega^T, b = (1 - e2) m_e. All array inputs
    broadcast against each other; the result carries their broadcast shape
    ahead of the matrix axes.

    Returns:
        (A, b) with shapes (..., 3, 3) and (..., 3).
    """
    e1, e2 = relaxation_factors(t1, t2, tr)
    angle, omega, e1, e2 = np.broadcast_arrays(
        np.asarray(angle, dtype=np.float64), np.asarray(omega, dtype=np.float64),
        np.asarray(e1), np.asarray(e2))
    V = rotation_z(precession_phase(omega, tr))
    R = rotation_x(angle)
    E = relaxation_matrix(e1, e2)
    A = E @ V @ R @ np.swapaxes(V, -1, -2)
    return A, recharge_vector(e2)


def bloch_step(m: MagState, A: np.ndarray, b: np.ndarray) -> MagState:
    """Advance one repetition: returns A m + b (batched over leading axes)."""
    return np.einsum("...ij,...j->...i", A, m) + b


def simulate_exact_batch(
    t1: np.ndarray,
    t2: np.ndarray,
    omega: np.ndarray,
    sched: FlipSchedule,
) -> np.ndarray:
    """
    Exact Bloch responses for a batch of voxels.

    Args:
        t1, t2, omega: Arrays of shape (P,).
        sched: Flip schedule of length L.

    Returns:
        States of shape (P, L, 3): m_1 .. m_L for every voxel.
    """
    t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
    t2 = np.atleast_1d(np.asarray(t2, dtype=np.float64))
    omega = np.atleast_1d(np.asarray(omega, dtype=np.float64))
    n_voxels = t1.shape[0]

    states = np.empty((n_voxels, sched.length, 3))
    m = np.broadcast_to(M_INITIAL, (n_voxels, 3)).copy()
    for l, angle in enumerate(sched.angles):
        A, b = transition_matrix(angle, omega, t1, t2, sched.tr)
        m = bloch_step(m, A, b)
        states[:, l] = m
    return states


def simulate_exact(u: TissueParams, sched: FlipSchedule) -> np.ndarray:
    """
    Exact Bloch response of one voxel.

    Returns:
        Array (L, 3) holding m_1 .. m_L, starting from m_0 = (0, 0, -1).
    """
    return simulate_exact_batch(
        np.array([u.t1]), np.array([u.t2]), np.array([u.omega]), sched)[0]


def transverse(states: np.ndarray) -> np.ndarray:
    """Complex transverse signal m_x + i m_y of states (..., 3)."""
    return states[..., 0] + 1j * states[..., 1]


def synth_flip_schedule(length: int, seed: int, tr: float = 10.0) -> FlipSchedule:
    """
    Deterministic MRF-style flip-angle schedule.

    Sinusoidal lobes alpha_l = 10 deg + 50 deg * |sin(pi l / 250)| plus a
    seeded smooth perturbation bounded by 5 deg, so every angle lies in
    (0, 80] degrees. Inversion is not encoded here; it comes from m_0.

    Args:
        length: Number of repetitions L (>= 1).
        seed: Seed of the phantom/schedule stream.
        tr: Repetition time (ms).

    Raises:
        DomainError: If length < 1.
    """
    if length < 1:
        raise DomainError(f"schedule length must be >= 1, got {length}")

    rng = make_rng(seed, STREAM_PHANTOM)
    l = np.arange(1, length + 1, dtype=np.float64)
    base = 10.0 + 50.0 * np.abs(np.sin(np.pi * l / 250.0))

    # A few slow harmonics; |sum a_k sin(.)| <= sum a_k keeps the bound exact.
    n_terms = 3
    amplitudes = rng.uniform(0.2, 1.0, size=n_terms)
    periods = rng.uniform(150.0, 600.0, size=n_terms)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_terms)
    wiggle = np.sum(amplitudes[:, None] * np.sin(2.0 * np.pi * l[None, :] / periods[:, None]
                                                  + phases[:, None]), axis=0)
    perturbation = 5.0 * wiggle / np.sum(amplitudes)

    degrees = np.clip(base + perturbation, 1e-3, 80.0)
    return FlipSchedule(angles=np.radians(degrees), tr=tr)
