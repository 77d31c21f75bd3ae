"""
Synthetic Experiments

Phantoms, multishot EPI sampling masks, retrospective acquisition
simulation, reconstruction metrics (PSNR, MAPE, wrapped off-resonance
error) and the method pipeline that runs BLIP, FINE and C2F (alone or
chained) on one acquisition.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .blip_init import Dictionary, blip_reconstruct
from .bloch_model import FlipSchedule, TissueParams, simulate_exact_batch, transverse
from .errors import DomainError
from .mri_operator import (
    CHANNEL_NAMES,
    AcquisitionData,
    MultiscaleForwardModel,
    ParameterMaps,
    fourier_2d,
)
from .optimizer import BacktrackConfig, C2FSchedule, IterationTrace, StepSizes, c2f
from .utils import (
    DEFAULT_CHUNK_SIZE,
    STREAM_GRID_OFFSETS,
    STREAM_MASKS,
    STREAM_NOISE,
    STREAM_PHANTOM,
    make_rng,
    map_voxel_chunks,
)

logger = logging.getLogger(__name__)

PHANTOM_KINDS = ("ellipses", "blocks")
METHODS = ("BLIP", "FINE", "C2F", "BLIP+FINE", "BLIP+C2F")

# (rho, T1 ms, T2 ms) of the three base tissues.
WHITE_MATTER = (0.69, 811.0, 77.0)
GREY_MATTER = (0.86, 1331.0, 110.0)
CSF = (1.0, 4500.0, 500.0)
TISSUES = (WHITE_MATTER, GREY_MATTER, CSF)

# Valid placeholder relaxation times under rho = 0.
BACKGROUND_T1 = 1000.0
BACKGROUND_T2 = 100.0

OMEGA_LIMIT = 50.0
RHO_RANGE = (0.6, 1.17)
T1_RANGE = (300.0, 6000.0)
T2_RANGE = (30.0, 600.0)


@dataclass
class Phantom:
    """
    Ground-truth parameter maps with their foreground (rho > 0).

    Attributes:
        maps: Ground truth (rho, T1, T2, omega).
        foreground: Boolean (n, m) mask of tissue pixels.
        kind: Geometry used to draw the phantom.
        seed: Seed of the phantom stream.
    """
    maps: ParameterMaps
    foreground: np.ndarray = None
    kind: str = "ellipses"
    seed: int = 0

    def __post_init__(self):
        if self.foreground is None:
            self.foreground = self.maps.rho > 0
        v = self.maps
        if np.any((v.rho < 0) | (v.rho > RHO_RANGE[1])):
            raise DomainError("phantom rho outside [0, 1.17]")
        if np.any((v.t1 < T1_RANGE[0]) | (v.t1 > T1_RANGE[1])):
            raise DomainError("phantom T1 outside [300, 6000] ms")
        if np.any((v.t2 < T2_RANGE[0]) | (v.t2 > T2_RANGE[1])):
            raise DomainError("phantom T2 outside [30, 600] ms")
        if np.any(np.abs(v.omega) > OMEGA_LIMIT + 1e-9):
            raise DomainError("phantom |omega| exceeds 50 Hz")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.maps.shape


def _coordinates(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates in [-1, 1], (row, column)."""
    axis = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(axis, axis, indexing="ij")


def _ellipse(y, x, cy, cx, ry, rx) -> np.ndarray:
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def _block(y, x, cy, cx, ry, rx) -> np.ndarray:
    return (np.abs(y - cy) <= ry) & (np.abs(x - cx) <= rx)


def make_phantom(size: int, kind: str = "ellipses", seed: int = 0) -> Phantom:
    """
    Deterministic piecewise-constant brain-like phantom.

    Three base tissue regions drawn as four shapes: grey matter outside,
    white matter inside it, and two CSF ventricles that share one tissue
    and count as a single region. Up to three seeded inclusions follow, so
    a phantom holds 3 to 6 regions. A smooth off-resonance ramp stays within
    +-50 Hz, and the rho = 0 background covers well over a quarter of the
    image.

    Args:
        size: Image side in pixels (>= 16).
        kind: "ellipses" or "blocks".
        seed: Seed of the phantom stream.

    Raises:
        DomainError: If size < 16 or kind is unknown.
    """
    if size < 16:
        raise DomainError(f"phantom size must be >= 16, got {size}")
    if kind not in PHANTOM_KINDS:
        raise DomainError(f"phantom kind must be one of {PHANTOM_KINDS}, got {kind!r}")

    rng = make_rng(seed, STREAM_PHANTOM)
    shape_fn = _ellipse if kind == "ellipses" else _block
    y, x = _coordinates(size)

    if kind == "ellipses":
        regions = [
            ((0.0, 0.0, 0.80, 0.65), GREY_MATTER),
            ((0.0, 0.0, 0.60, 0.48), WHITE_MATTER),
            ((-0.12, -0.16, 0.22, 0.08), CSF),
            ((-0.12, 0.16, 0.22, 0.08), CSF),
        ]
    else:
        regions = [
            ((0.0, 0.0, 0.75, 0.70), GREY_MATTER),
            ((0.0, 0.0, 0.50, 0.48), WHITE_MATTER),
            ((-0.10, -0.18, 0.22, 0.08), CSF),
            ((-0.10, 0.18, 0.22, 0.08), CSF),
        ]

    for _ in range(int(rng.integers(0, 4))):
        cy, cx = rng.uniform(0.20, 0.38), rng.uniform(-0.30, 0.30)
        radius = rng.uniform(0.06, 0.10)
        rho_t, t1_t, t2_t = TISSUES[int(rng.integers(0, len(TISSUES)))]
        rho_t = float(np.clip(rho_t * rng.uniform(0.9, 1.1), *RHO_RANGE))
        regions.append(((cy, cx, radius, radius), (rho_t, t1_t, t2_t)))

    rho = np.zeros((size, size))
    t1 = np.full((size, size), BACKGROUND_T1)
    t2 = np.full((size, size), BACKGROUND_T2)
    for (cy, cx, ry, rx), (rho_r, t1_r, t2_r) in regions:
        inside = shape_fn(y, x, cy, cx, ry, rx)
        rho[inside] = rho_r
        t1[inside] = t1_r
        t2[inside] = t2_r

    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = math.cos(theta), math.sin(theta)
    omega = OMEGA_LIMIT * (c * x + s * y) / (abs(c) + abs(s))

    maps = ParameterMaps.from_channels(rho, t1, t2, omega)
    return Phantom(maps=maps, foreground=rho > 0, kind=kind, seed=seed)


def make_epi_masks(n: int, m: int, rate: float, L: int, seed: int) -> np.ndarray:
    """
    Multishot EPI masks with a random shot offset per frame.

    Frame l keeps the full rows (phase-encode lines) whose index is
    congruent to delta_l modulo 1/rate, with delta_l uniform on
    {0, ..., 1/rate - 1}.

    Returns:
        Boolean masks of shape (L, n, m).

    Raises:
        DomainError: If 1/rate is not an integer dividing n.
    """
    if not 0 < rate <= 1:
        raise DomainError(f"sampling rate must lie in (0, 1], got {rate}")
    shots = int(round(1.0 / rate))
    if abs(1.0 / rate - shots) > 1e-9 or n % shots:
        raise DomainError(f"rate {rate} does not divide {n} phase-encode lines into equal shots")
    offsets = make_rng(seed, STREAM_MASKS).integers(0, shots, size=L)
    rows = np.arange(n)
    masks = np.zeros((L, n, m), dtype=bool)
    masks[:, :, :] = ((rows[None, :] % shots) == offsets[:, None])[:, :, None]
    return masks


def simulate_acquisition(
    phantom: Phantom,
    sched: FlipSchedule,
    masks: np.ndarray,
    noise_sigma: float = 0.0,
    seed: int = 0,
    rate: Optional[float] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> AcquisitionData:
    """
    Retrospective data y_l = P_l F(rho T_xy m_l(u)) from the exact simulator.

    Args:
        noise_sigma: Standard deviation of the complex Gaussian noise per
            sampled entry (sigma / sqrt(2) per real component).
        seed: Seed of the noise stream (ignored without noise).

    Raises:
        DomainError: If mask and phantom dimensions disagree.
    """
    n, m = phantom.shape
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (sched.length, n, m):
        raise DomainError(
            f"masks {masks.shape} do not match (L, n, m) = ({sched.length}, {n}, {m})")
    if noise_sigma < 0:
        raise DomainError(f"noise sigma must be >= 0, got {noise_sigma}")

    maps = phantom.maps
    active = np.flatnonzero(maps.rho.reshape(-1) != 0)
    tissue = maps.tissue().subset(active)
    rho = maps.rho.reshape(-1)[active]

    def simulate(chunk: slice) -> np.ndarray:
        states = simulate_exact_batch(tissue.t1[chunk], tissue.t2[chunk], tissue.omega[chunk], sched)
        return rho[chunk, None] * transverse(states)

    signals = np.zeros((sched.length, n * m), dtype=np.complex128)
    if active.size:
        signals[:, active] = np.concatenate(
            map_voxel_chunks(simulate, active.size, chunk_size, workers), axis=0).T
    kspace = fourier_2d(signals.reshape(sched.length, n, m), workers=workers)

    if noise_sigma > 0:
        rng = make_rng(seed, STREAM_NOISE)
        scale = noise_sigma / math.sqrt(2.0)
        kspace = kspace + scale * (rng.standard_normal(kspace.shape)
                                   + 1j * rng.standard_normal(kspace.shape))

    if rate is None:
        rate = float(masks.mean())
    return AcquisitionData(frames=kspace, masks=masks, schedule=sched, rate=rate, seed=seed)


def psnr(recon: np.ndarray, truth: np.ndarray, peak: Optional[float] = None) -> float:
    """
    10 log10(peak^2 / MSE); +inf when recon equals truth.

    Pass the foreground pixels only (e.g. `recon[fg]`, `truth[fg]`): the
    reported metrics exclude the rho = 0 background, which evaluate_maps
    does by masking before it computes the error.

    Args:
        peak: Defaults to max |truth| over the pixels passed in.
    """
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise DomainError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    return _psnr_from_error(recon - truth, float(np.max(np.abs(truth))) if peak is None else peak)


def _psnr_from_error(error: np.ndarray, peak: float) -> float:
    mse = float(np.mean(np.square(error)))
    if mse == 0.0:
        return math.inf
    with np.errstate(divide="ignore"):
        return float(10.0 * np.log10(peak * peak / mse))


def mape(recon: np.ndarray, truth: np.ndarray, mask: np.ndarray, channel: Optional[str] = None) -> float:
    """
    100 * mean(|recon - truth| / |truth|) over the masked pixels.

    Raises:
        DomainError: For the omega channel, an empty mask, or a zero truth
            value inside the mask.
    """
    if channel == "omega":
        raise DomainError("MAPE is not defined for the off-resonance channel")
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("MAPE needs a non-empty mask")
    reference = np.abs(truth[mask])
    if np.any(reference == 0):
        raise DomainError("MAPE mask includes pixels where the truth is zero")
    return float(100.0 * np.mean(np.abs(recon[mask] - truth[mask]) / reference))


def omega_wrap_error(recon_omega: np.ndarray, truth_omega: np.ndarray, period: float = 100.0) -> np.ndarray:
    """((recon - truth + period/2) mod period) - period/2, pixelwise."""
    if not period > 0:
        raise DomainError(f"wrap period must be positive, got {period}")
    difference = np.asarray(recon_omega, dtype=np.float64) - np.asarray(truth_omega, dtype=np.float64)
    return np.mod(difference + 0.5 * period, period) - 0.5 * period


def _metric_to_json(value: float):
    return "inf" if math.isinf(value) and value > 0 else value


def _metric_from_json(value) -> float:
    return math.inf if value == "inf" else float(value)


@dataclass
class MetricsReport:
    """
    PSNR for (rho, T1, T2, omega) and MAPE for (rho, T1, T2) over the foreground.

    Attributes:
        psnr: dB per channel; +inf for an exact reconstruction.
        mape: Percent per channel (no omega entry).
        foreground_pixels: Pixels the metrics were computed over.
        wrap_period: Off-resonance period used for the omega error (Hz).
        peak_convention: How the PSNR peak was chosen.
    """
    psnr: Dict[str, float]
    mape: Dict[str, float]
    foreground_pixels: int
    wrap_period: float
    peak_convention: str = "max |truth| per channel over the foreground"
    label: str = ""

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "channels": list(CHANNEL_NAMES),
            "psnr_db": {k: _metric_to_json(v) for k, v in self.psnr.items()},
            "mape_percent": dict(self.mape),
            "foreground_pixels": self.foreground_pixels,
            "wrap_period_hz": self.wrap_period,
            "peak_convention": self.peak_convention,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "MetricsReport":
        return cls(
            psnr={k: _metric_from_json(v) for k, v in payload["psnr_db"].items()},
            mape={k: float(v) for k, v in payload["mape_percent"].items()},
            foreground_pixels=int(payload["foreground_pixels"]),
            wrap_period=float(payload["wrap_period_hz"]),
            peak_convention=payload.get("peak_convention", ""),
            label=payload.get("label", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        """Aligned plain-text table: one PSNR row and one MAPE row over (rho, T1, T2, omega)."""
        headers = ["", "rho", "T1", "T2", "omega"]
        psnr_row = ["PSNR (dB)"] + [
            "inf" if math.isinf(self.psnr[c]) else f"{self.psnr[c]:.2f}" for c in CHANNEL_NAMES]
        mape_row = ["MAPE (%)"] + [
            f"{self.mape[c]:.2f}" if c in self.mape else "-" for c in CHANNEL_NAMES]
        widths = [max(len(r[i]) for r in (headers, psnr_row, mape_row)) for i in range(len(headers))]
        widths = [max(w, 10) for w in widths]

        def line(cells: List[str]) -> str:
            return "  " + " | ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                                     for i, cell in enumerate(cells))

        lines = []
        if self.label:
            lines.append(f"  {self.label}")
        lines.append(line(headers))
        lines.append("  " + "-+-".join("-" * w for w in widths))
        lines.append(line(psnr_row))
        lines.append(line(mape_row))
        lines.append(f"  foreground pixels: {self.foreground_pixels}, "
                     f"omega wrap period: {self.wrap_period:g} Hz, PSNR peak: {self.peak_convention}")
        return "\n".join(lines)


def evaluate_maps(
    recon: ParameterMaps,
    truth: ParameterMaps,
    foreground: Optional[np.ndarray] = None,
    period: float = 100.0,
    label: str = "",
) -> MetricsReport:
    """
    Metrics of a reconstruction against ground truth, restricted to the foreground.

    Raises:
        DomainError: If the map shapes differ or the foreground is empty.
    """
    if recon.shape != truth.shape:
        raise DomainError(f"recon maps are {recon.shape}, truth maps are {truth.shape}")
    if foreground is None:
        foreground = truth.rho > 0
    foreground = np.asarray(foreground, dtype=bool)
    if not foreground.any():
        raise DomainError("evaluation needs a non-empty foreground")

    scores: Dict[str, float] = {}
    errors: Dict[str, float] = {}
    for i, name in enumerate(CHANNEL_NAMES):
        r = recon.channel(i)[foreground]
        t = truth.channel(i)[foreground]
        peak = float(np.max(np.abs(t)))
        if name == "omega":
            scores[name] = _psnr_from_error(omega_wrap_error(r, t, period), peak)
        else:
            scores[name] = _psnr_from_error(r - t, peak)
            errors[name] = mape(r, t, np.ones_like(t, dtype=bool), channel=name)
    return MetricsReport(psnr=scores, mape=errors, foreground_pixels=int(foreground.sum()),
                         wrap_period=period, label=label)


@dataclass
class ReconstructionResult:
    """Outcome of one method run."""
    method: str
    maps: ParameterMaps
    trace: IterationTrace = field(default_factory=IterationTrace)
    initial_maps: Optional[ParameterMaps] = None
    final_objective: Optional[float] = None


def run_method(
    method: str,
    data: AcquisitionData,
    initial_guess: TissueParams,
    tau0: StepSizes,
    schedule: C2FSchedule,
    fine_iterations: int,
    backtrack: BacktrackConfig,
    seed: int,
    dictionary: Optional[Dictionary] = None,
    blip_iterations: int = 50,
    blip_mu: float = 1.0,
    rho_mode: str = "real",
    true_objective_every: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> ReconstructionResult:
    """
    Run BLIP, FINE, C2F or a BLIP-initialized optimizer on one acquisition.

    FINE is C2F with the single-stage schedule N = (1), K = (fine_iterations).
    Without BLIP the optimizer starts from the constant initial guess.

    Raises:
        DomainError: For an unknown method or a BLIP method without a dictionary.
    """
    if method not in METHODS:
        raise DomainError(f"method must be one of {METHODS}, got {method!r}")
    model = MultiscaleForwardModel(data, chunk_size=chunk_size, workers=workers)
    n, m = data.shape

    if method.startswith("BLIP"):
        if dictionary is None:
            raise DomainError(f"method {method} needs a dictionary")
        start = blip_reconstruct(data, dictionary, blip_iterations, blip_mu, rho_mode,
                                 chunk_size, workers)
    else:
        start = ParameterMaps.constant(n, m, initial_guess)

    if method == "BLIP":
        return ReconstructionResult(method=method, maps=start, initial_maps=start,
                                    final_objective=model.true_objective(start))

    plan = schedule if method.endswith("C2F") else C2FSchedule.fine(fine_iterations)
    rng = make_rng(seed, STREAM_GRID_OFFSETS)
    maps, trace = c2f(start, tau0, plan, model, backtrack, rng, true_objective_every)
    trace.header["method"] = method
    return ReconstructionResult(method=method, maps=maps, trace=trace, initial_maps=start,
                                final_objective=trace.final_f_true)
