"""
Multiscale MRI Forward Model

The imaging operator Q_{l,S}(x) = P_l F(rho * T_xy m_{l,S}(u)), the
multiscale objective

    F_S(x) = 1 / (2 |S|) * sum_{l in S} || Q_{l,S}(x) - y_l ||^2,

its gradient and the Jacobian / adjoint pair. The Fourier transform is
unitary, so the adjoint of P_l F is F^-1 applied to the zero-filled masked
field. With the fine grid S_1(1) the objective is the true data misfit.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.fft

from .bloch_model import FlipSchedule, TissueParams, transverse
from .errors import DomainError
from .multiscale_bloch import TemporalGrid, TissueBatch, simulate_multiscale_batch
from .utils import DEFAULT_CHUNK_SIZE, map_voxel_chunks

logger = logging.getLogger(__name__)

CHANNEL_NAMES: Tuple[str, str, str, str] = ("rho", "t1", "t2", "omega")
CHANNEL_UNITS: Tuple[str, str, str, str] = ("a.u.", "ms", "ms", "Hz")
RHO, T1, T2, OMEGA = 0, 1, 2, 3
ALL_CHANNELS: Tuple[int, int, int, int] = (RHO, T1, T2, OMEGA)


class ParameterMaps:
    """
    Four real parameter channels (rho, T1, T2, omega) over an n x m image.

    The channels live in one float64 array of shape (4, n, m); pixels are
    flattened row-major wherever a voxel axis is needed.
    """

    def __init__(self, values: np.ndarray):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != 4:
            raise DomainError(f"parameter maps need shape (4, n, m), got {values.shape}")
        self.values = values

    @classmethod
    def from_channels(cls, rho, t1, t2, omega) -> "ParameterMaps":
        shapes = {np.shape(c) for c in (rho, t1, t2, omega)}
        if len(shapes) != 1:
            raise DomainError(f"channel shapes differ: {sorted(shapes)}")
        return cls(np.stack([rho, t1, t2, omega]))

    @classmethod
    def constant(cls, n: int, m: int, u: TissueParams) -> "ParameterMaps":
        """Every pixel set to the same tissue parameters."""
        values = np.empty((4, n, m))
        for i, value in enumerate((u.rho, u.t1, u.t2, u.omega)):
            values[i] = value
        return cls(values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.values.shape[1] * self.values.shape[2]

    @property
    def rho(self) -> np.ndarray:
        return self.values[RHO]

    @property
    def t1(self) -> np.ndarray:
        return self.values[T1]

    @property
    def t2(self) -> np.ndarray:
        return self.values[T2]

    @property
    def omega(self) -> np.ndarray:
        return self.values[OMEGA]

    def channel(self, index: int) -> np.ndarray:
        return self.values[index]

    def with_channel(self, index: int, values: np.ndarray) -> "ParameterMaps":
        updated = self.values.copy()
        updated[index] = values
        return ParameterMaps(updated)

    def copy(self) -> "ParameterMaps":
        return ParameterMaps(self.values.copy())

    def tissue(self) -> TissueBatch:
        """Flattened (T1, T2, omega) of every pixel."""
        return TissueBatch(self.t1.reshape(-1), self.t2.reshape(-1), self.omega.reshape(-1))

    def __eq__(self, other) -> bool:
        return isinstance(other, ParameterMaps) and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        n, m = self.shape
        return f"ParameterMaps({n}x{m})"


@dataclass(frozen=True)
class SamplingMask:
    """Boolean k-space mask of one frame (0-based `frame` index into the stack)."""
    mask: np.ndarray
    frame: int

    @property
    def rate(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.mask.size

    def apply(self, kspace: np.ndarray) -> np.ndarray:
        return np.where(self.mask, kspace, 0.0)


@dataclass
class AcquisitionData:
    """
    Zero-filled k-space frames y_1..y_L with their sampling masks.

    Attributes:
        frames: Complex k-space, shape (L, n, m); zero off-mask.
        masks: Boolean masks, shape (L, n, m).
        schedule: Flip schedule of length L.
        rate: Nominal subsampling rate the masks were drawn with.
        seed: Seed the acquisition was simulated with (informational).
    """
    frames: np.ndarray
    masks: np.ndarray
    schedule: FlipSchedule
    rate: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.shape != self.masks.shape or frames.ndim != 3:
            raise DomainError(
                f"frames {frames.shape} and masks {self.masks.shape} must share shape (L, n, m)")
        if frames.shape[0] != self.schedule.length:
            raise DomainError(
                f"{frames.shape[0]} frames but the schedule has L={self.schedule.length}")
        self.frames = np.where(self.masks, frames, 0.0)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def mask(self, frame: int) -> SamplingMask:
        """Mask of the 1-based frame number."""
        return SamplingMask(self.masks[frame - 1], frame - 1)


@dataclass
class ObjectiveReport:
    """
    Value (and optionally gradient) of F_S.

    Attributes:
        value: F_S(x) >= 0.
        grid: Grid the objective was evaluated on.
        gradient: (4, n, m) gradient; channels that were not requested are zero.
    """
    value: float
    grid: TemporalGrid
    gradient: Optional[np.ndarray] = None


def fourier_2d(image: np.ndarray, workers: int = 1) -> np.ndarray:
    """Unitary 2D DFT over the last two axes."""
    return scipy.fft.fft2(image, axes=(-2, -1), norm="ortho", workers=workers)


def inverse_fourier_2d(kspace: np.ndarray, workers: int = 1) -> np.ndarray:
    """Inverse of fourier_2d (and its adjoint)."""
    return scipy.fft.ifft2(kspace, axes=(-2, -1), norm="ortho", workers=workers)


def _grid_slot(grid: TemporalGrid, l: int) -> int:
    """Position of frame l within the grid."""
    offset = l - grid.offset
    if offset < 0 or offset % grid.increment or offset // grid.increment >= grid.size:
        raise DomainError(
            f"frame {l} is not on grid S_{grid.increment}({grid.offset}) of length {grid.length}")
    return offset // grid.increment


def forward_frame(
    x: ParameterMaps,
    l: int,
    grid: TemporalGrid,
    mask: SamplingMask,
    states: np.ndarray,
    workers: int = 1,
) -> np.ndarray:
    """
    Q_{l,S}(x) = P_l F(rho * (m_x + i m_y)).

    Args:
        x: Parameter maps.
        l: 1-based frame number; must lie on grid.
        grid: The temporal grid.
        mask: Sampling mask of frame l.
        states: Multiscale states for x's (T1, T2, omega), shape (n*m, |S|, 3).

    Raises:
        DomainError: If l is not a grid frame.
    """
    slot = _grid_slot(grid, l)
    n, m = x.shape
    signal = x.rho * transverse(states[:, slot]).reshape(n, m)
    return mask.apply(fourier_2d(signal, workers=workers))


class MultiscaleForwardModel:
    """
    Forward model, objective and gradient for one acquisition.

    Bloch states of the last (grid, T1, T2, omega) are cached, so repeated
    evaluations that only move rho (or do not move at all) skip the Bloch
    simulation. Voxels are processed in chunks of `chunk_size` on up to
    `workers` threads; results are reassembled in chunk order.
    """

    def __init__(self, data: AcquisitionData, chunk_size: int = DEFAULT_CHUNK_SIZE, workers: int = 1):
        self.data = data
        self.chunk_size = chunk_size
        self.workers = max(1, int(workers))
        self._cache_key: Optional[Tuple[int, int, int]] = None
        self._cache_params: Optional[np.ndarray] = None
        self._cache_states: Optional[np.ndarray] = None
        self.simulations = 0

    @property
    def length(self) -> int:
        return self.data.length

    def _check_maps(self, x: ParameterMaps) -> None:
        if x.shape != self.data.shape:
            raise DomainError(f"maps are {x.shape} but the data is {self.data.shape}")

    def _check_grid(self, grid: TemporalGrid) -> None:
        if grid.length != self.data.length:
            raise DomainError(
                f"grid built for L={grid.length} but the data has {self.data.length} frames")

    def _remember(self, x: ParameterMaps, grid: TemporalGrid, states: np.ndarray) -> None:
        self.simulations += 1
        self._cache_key = grid.key
        self._cache_params = x.values[1:].copy()
        self._cache_states = states

    def states(self, x: ParameterMaps, grid: TemporalGrid) -> np.ndarray:
        """Multiscale states of every pixel at the grid frames, shape (n*m, |S|, 3)."""
        self._check_maps(x)
        self._check_grid(grid)
        params = x.values[1:]
        if (self._cache_key == grid.key and self._cache_params is not None
                and np.array_equal(self._cache_params, params)):
            return self._cache_states

        tissue = x.tissue()
        sched = self.data.schedule

        def simulate(chunk: slice) -> np.ndarray:
            return simulate_multiscale_batch(tissue.subset(chunk), sched, grid)[0]

        parts = map_voxel_chunks(simulate, tissue.size, self.chunk_size, self.workers)
        states = np.concatenate(parts, axis=0)
        self._remember(x, grid, states)
        return states

    def linearize(
        self,
        x: ParameterMaps,
        grid: TemporalGrid,
        wrt: Sequence[int],
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        States and transverse derivatives from a single Bloch pass.

        Args:
            wrt: Bloch parameter columns (0 = T1, 1 = T2, 2 = omega).

        Returns:
            (states (n*m, |S|, 3), d(m_x + i m_y)/d chi of shape (n*m, |S|, len(wrt))).
            The states replace the cached ones.
        """
        self._check_maps(x)
        self._check_grid(grid)
        tissue = x.tissue()
        sched = self.data.schedule
        columns = list(wrt)

        def simulate(chunk: slice) -> Tuple[np.ndarray, np.ndarray]:
            states, jac = simulate_multiscale_batch(
                tissue.subset(chunk), sched, grid, with_derivatives=True, wrt=wrt)
            return states, jac[:, :, 0, columns] + 1j * jac[:, :, 1, columns]

        parts = map_voxel_chunks(simulate, tissue.size, self.chunk_size, self.workers)
        states = np.concatenate([part[0] for part in parts], axis=0)
        dtx = np.concatenate([part[1] for part in parts], axis=0)
        self._remember(x, grid, states)
        return states, dtx

    def _signals_of(self, x: ParameterMaps, grid: TemporalGrid, states: np.ndarray) -> np.ndarray:
        n, m = x.shape
        return x.rho[None] * np.moveaxis(transverse(states), 1, 0).reshape(grid.size, n, m)

    def signals(self, x: ParameterMaps, grid: TemporalGrid) -> np.ndarray:
        """Image-domain signals rho * T_xy m_{l,S}, shape (|S|, n, m)."""
        return self._signals_of(x, grid, self.states(x, grid))

    def _residuals_of(self, x: ParameterMaps, grid: TemporalGrid, states: np.ndarray) -> np.ndarray:
        kspace = fourier_2d(self._signals_of(x, grid, states), workers=self.workers)
        forward = np.where(self.data.masks[grid.frame_slots], kspace, 0.0)
        return forward - self.data.frames[grid.frame_slots]

    def forward(self, x: ParameterMaps, grid: TemporalGrid) -> np.ndarray:
        """Q_{l,S}(x) for every l in S, shape (|S|, n, m)."""
        kspace = fourier_2d(self.signals(x, grid), workers=self.workers)
        return np.where(self.data.masks[grid.frame_slots], kspace, 0.0)

    def residuals(self, x: ParameterMaps, grid: TemporalGrid) -> np.ndarray:
        return self._residuals_of(x, grid, self.states(x, grid))

    def objective(self, x: ParameterMaps, grid: TemporalGrid) -> ObjectiveReport:
        """F_S(x), value only."""
        residual = self.residuals(x, grid)
        value = 0.5 * float(np.vdot(residual, residual).real) / grid.size
        return ObjectiveReport(value=value, grid=grid)

    def true_objective(self, x: ParameterMaps) -> float:
        """F(x) = F_{S_1(1)}(x)."""
        return self.objective(x, TemporalGrid.fine(self.data.length)).value

    def backproject(self, field_: np.ndarray, grid: TemporalGrid) -> np.ndarray:
        """(P_l F)^* applied per grid frame: inverse DFT of the masked field."""
        masked = np.where(self.data.masks[grid.frame_slots], field_, 0.0)
        return inverse_fourier_2d(masked, workers=self.workers)

    def _contract(
        self,
        x: ParameterMaps,
        grid: TemporalGrid,
        w: np.ndarray,
        channels: Sequence[int],
        states: np.ndarray,
        dtx: Optional[np.ndarray],
    ) -> np.ndarray:
        """J^* w from precomputed states and transverse derivatives (columns of non-rho channels)."""
        n, m = x.shape
        backprojected = self.backproject(w, grid).reshape(grid.size, n * m)
        out = np.zeros((4, n * m))
        if RHO in channels:
            out[RHO] = np.einsum("pj,jp->p", np.conj(transverse(states)), backprojected).real
        bloch_channels = [c for c in channels if c != RHO]
        if bloch_channels:
            weighted = x.rho.reshape(-1)[:, None, None] * dtx
            derivative = np.einsum("pjc,jp->cp", np.conj(weighted), backprojected).real
            for col, channel in enumerate(bloch_channels):
                out[channel] = derivative[col]
        return out.reshape(4, n, m)

    def jacobian_adjoint(
        self,
        x: ParameterMaps,
        grid: TemporalGrid,
        w: np.ndarray,
        channels: Sequence[int] = ALL_CHANNELS,
    ) -> np.ndarray:
        """
        J^* w for a data-side field w of shape (|S|, n, m).

        Returns:
            Real (4, n, m) array; channels not requested stay zero.
        """
        self._check_maps(x)
        wrt = tuple(c - 1 for c in channels if c != RHO)
        if wrt:
            states, dtx = self.linearize(x, grid, wrt)
        else:
            states, dtx = self.states(x, grid), None
        return self._contract(x, grid, w, channels, states, dtx)

    def gradient(
        self,
        x: ParameterMaps,
        grid: TemporalGrid,
        channels: Sequence[int] = ALL_CHANNELS,
    ) -> ObjectiveReport:
        """
        F_S(x) and its gradient (1/|S|) J^* r.

        The residual and the Jacobian come from one Bloch pass with derivatives.

        Args:
            channels: Channels whose partial derivatives are needed; the rest
                of the gradient is left at zero.
        """
        self._check_maps(x)
        wrt = tuple(c - 1 for c in channels if c != RHO)
        if wrt:
            states, dtx = self.linearize(x, grid, wrt)
        else:
            states, dtx = self.states(x, grid), None
        residual = self._residuals_of(x, grid, states)
        value = 0.5 * float(np.vdot(residual, residual).real) / grid.size
        grad = self._contract(x, grid, residual, channels, states, dtx) / grid.size
        return ObjectiveReport(value=value, grid=grid, gradient=grad)

    def jacobian_apply(self, x: ParameterMaps, l: int, grid: TemporalGrid, h: np.ndarray) -> np.ndarray:
        """
        Q'_{l,S}(x) h = P_l F T_xy(h_rho m_{l,S}(u) + rho m'_{l,S}(u) h_u).

        Args:
            h: Real perturbation of shape (4, n, m).
        """
        self._check_maps(x)
        slot = _grid_slot(grid, l)
        n, m = x.shape
        h = np.asarray(h, dtype=np.float64).reshape(4, -1)
        tissue = x.tissue()
        rho = x.rho.reshape(-1)
        sched = self.data.schedule

        def perturb(chunk: slice) -> np.ndarray:
            states, jac = simulate_multiscale_batch(
                tissue.subset(chunk), sched, grid, with_derivatives=True)
            tx = transverse(states[:, slot])
            dtx = jac[:, slot, 0, :] + 1j * jac[:, slot, 1, :]
            return h[RHO, chunk] * tx + rho[chunk] * np.einsum("pc,cp->p", dtx, h[1:, chunk])

        parts = map_voxel_chunks(perturb, n * m, self.chunk_size, self.workers)
        image = np.concatenate(parts).reshape(n, m)
        return self.data.mask(l).apply(fourier_2d(image, workers=self.workers))

    def jacobian_apply_all(self, x: ParameterMaps, grid: TemporalGrid, h: np.ndarray) -> np.ndarray:
        """Stacked jacobian_apply over every grid frame, shape (|S|, n, m)."""
        return np.stack([self.jacobian_apply(x, int(l), grid, h) for l in grid.indices])


def objective(x: ParameterMaps, data: AcquisitionData, grid: TemporalGrid) -> ObjectiveReport:
    """F_S(x) on a throwaway forward model."""
    return MultiscaleForwardModel(data).objective(x, grid)


def gradient(x: ParameterMaps, data: AcquisitionData, grid: TemporalGrid) -> ObjectiveReport:
    """F_S(x) and its full gradient on a throwaway forward model."""
    return MultiscaleForwardModel(data).gradient(x, grid)


def jacobian_apply(x: ParameterMaps, l: int, grid: TemporalGrid, h: np.ndarray,
                   data: AcquisitionData) -> np.ndarray:
    """Q'_{l,S}(x) h for the masks and schedule of `data`."""
    return MultiscaleForwardModel(data).jacobian_apply(x, l, grid, h)
