"""
Temporal Multiscale Bloch Mapping

Coarse temporal stepping of the IR-bSSFP recursion. Over an interval of N
repetitions the flip angle is replaced by its mean, so the transition matrix
A is constant and

    m_{l+N} = A^N m_l + sum_{k<N} A^k b
            = (sum_i lambda_i^N U_i) m_l + (sum_i (1 - lambda_i^N)/(1 - lambda_i) U_i) b,

with A = sum_i lambda_i U_i its spectral decomposition. Parameter
derivatives with respect to (T1, T2, omega) are propagated alongside the
states through the same intervals.

The eigen-decomposition uses the similarity A = V_omega B V_omega^T with
B = E R_alpha, whose characteristic cubic factors as
(lambda - e1)(lambda^2 - (e1 + e2) cos(alpha) lambda + e1 e2), so all three
eigenvalues come in closed form. Voxels whose eigenvalues (nearly) coincide
are flagged as defective and advanced with an exact matrix power instead.

The batch simulator works in the frame precessing with V_omega. E acts as a
scalar on the plane V_omega rotates, so every A_l equals V_omega B_l V_omega^T
and the whole trajectory is V_omega applied to the omega-free one. In that
frame m_x stays zero and each interval is a 2x2 affine map on (m_y, m_z),
built for all intervals and voxels at once from the pair eigenvalues
lambda_+-: K^N = a_N K - e1 e2 a_{N-1} I with a_N = (lambda_+^N - lambda_-^N) /
(lambda_+ - lambda_-). Only the recursion over intervals is sequential.

All kernels are batched over a leading voxel axis P.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bloch_model import (
    M_EQUILIBRIUM,
    M_INITIAL,
    FlipSchedule,
    TissueParams,
    phase_rate,
    precession_phase,
    relaxation_factors,
    relaxation_matrix,
    rotation_x,
    rotation_z,
    rotation_z_derivative,
    transition_matrix,
)
from .errors import DomainError, NumericalConsistencyError

logger = logging.getLogger(__name__)

# Jacobian column order.
T1, T2, OMEGA = 0, 1, 2
PARAMETER_NAMES: Tuple[str, str, str] = ("t1", "t2", "omega")
ALL_PARAMETERS: Tuple[int, int, int] = (T1, T2, OMEGA)

DEFECTIVE_GAP = 1e-9          # relative eigenvalue gap below which a voxel is defective
IMAG_TOLERANCE = 1e-9         # imaginary residue silently discarded
IMAG_ERROR = 1e-6             # imaginary residue treated as a numerical failure
GEOMETRIC_SUM_EPS = 1e-8
GEOMETRIC_DERIVATIVE_EPS = 1e-6
COALESCENCE_GAP = 1e-6        # |h^2 - e1 e2| relative to e1 e2 below which interval maps are powered
ROW_BLOCK = 1 << 16           # interval-voxel rows of maps built at a time


@dataclass(frozen=True)
class TissueBatch:
    """
    Relaxation and off-resonance parameters for P voxels.

    Attributes:
        t1, t2: Relaxation times (ms), shape (P,).
        omega: Off-resonance (Hz), shape (P,).
    """
    t1: np.ndarray
    t2: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        t1, t2, omega = np.broadcast_arrays(
            np.atleast_1d(np.asarray(self.t1, dtype=np.float64)),
            np.atleast_1d(np.asarray(self.t2, dtype=np.float64)),
            np.atleast_1d(np.asarray(self.omega, dtype=np.float64)))
        object.__setattr__(self, "t1", np.ascontiguousarray(t1))
        object.__setattr__(self, "t2", np.ascontiguousarray(t2))
        object.__setattr__(self, "omega", np.ascontiguousarray(omega))

    @classmethod
    def coerce(cls, u: Union["TissueBatch", TissueParams]) -> "TissueBatch":
        if isinstance(u, TissueBatch):
            return u
        return cls(t1=np.array([u.t1]), t2=np.array([u.t2]), omega=np.array([u.omega]))

    @property
    def size(self) -> int:
        return int(self.t1.shape[0])

    def parameter(self, index: int) -> np.ndarray:
        return (self.t1, self.t2, self.omega)[index]

    def replace(self, index: int, values: np.ndarray) -> "TissueBatch":
        params = [self.t1, self.t2, self.omega]
        params[index] = values
        return TissueBatch(*params)

    def subset(self, selector) -> "TissueBatch":
        return TissueBatch(self.t1[selector], self.t2[selector], self.omega[selector])


@dataclass(frozen=True)
class TemporalGrid:
    """
    Uniform temporal grid S_N(delta) = {delta, delta + N, ..., delta + (floor(L/N) - 1) N}.

    Indices are 1-based frame numbers, as in the acquisition.

    Attributes:
        increment: Grid increment N >= 1.
        offset: Offset delta in {1, ..., N}.
        length: Schedule length L >= N.
    """
    increment: int
    offset: int
    length: int

    def __post_init__(self):
        if self.increment < 1:
            raise DomainError(f"grid increment must be >= 1, got {self.increment}")
        if not 1 <= self.offset <= self.increment:
            raise DomainError(
                f"grid offset must lie in 1..{self.increment}, got {self.offset}")
        if self.length < self.increment:
            raise DomainError(
                f"grid increment {self.increment} exceeds schedule length {self.length}")

    @classmethod
    def fine(cls, length: int) -> "TemporalGrid":
        """S_1(1): every frame."""
        return cls(increment=1, offset=1, length=length)

    @property
    def size(self) -> int:
        return self.length // self.increment

    @property
    def indices(self) -> np.ndarray:
        return self.offset + self.increment * np.arange(self.size)

    @property
    def frame_slots(self) -> np.ndarray:
        """0-based positions of the grid frames in an L-long frame stack."""
        return self.indices - 1

    @property
    def widths(self) -> np.ndarray:
        """Interval widths: the first interval reaches delta, the rest are N."""
        widths = np.full(self.size, self.increment, dtype=np.int64)
        widths[0] = self.offset
        return widths

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.increment, self.offset, self.length)


@dataclass(frozen=True)
class CoarseStepOperator:
    """
    Spectral factorization of one coarse interval for P voxels.

    Attributes:
        eigenvalues: lambda_i, shape (P, 3); conjugate pair (positive imaginary
            part first) then the real eigenvalue e1.
        projectors: U_i = Z G_i Z^-1, shape (P, 3, 3, 3) indexed [p, i, row, col].
        interval_mean_angle: Mean flip angle over the interval (rad).
        step_count: Interval width N.
        b: Recharge vector, shape (P, 3).
        transition: The real transition matrix A, shape (P, 3, 3).
        eigenvectors: Z = V_omega W, shape (P, 3, 3).
        eigenvectors_inv: Z^-1, shape (P, 3, 3).
        defective: Voxels whose eigenvalue gap is below DEFECTIVE_GAP, shape (P,).
    """
    eigenvalues: np.ndarray
    projectors: np.ndarray
    interval_mean_angle: float
    step_count: int
    b: np.ndarray
    transition: np.ndarray
    eigenvectors: np.ndarray
    eigenvectors_inv: np.ndarray
    defective: np.ndarray
    tissue: TissueBatch
    tr: float


@dataclass(frozen=True)
class CoarseStepDerivatives:
    """
    Parameter derivatives of a CoarseStepOperator.

    Attributes:
        dlambda: d lambda_i / d chi, shape (P, 3, 3) indexed [p, chi, i].
        dU: d U_i / d chi, shape (P, 3, 3, 3, 3) indexed [p, chi, i, row, col].
        db: d b / d chi, shape (P, 3, 3) indexed [p, chi, row].
        defective: Copied from the operator; derivatives of these voxels are meaningless.
    """
    dlambda: np.ndarray
    dU: np.ndarray
    db: np.ndarray
    defective: np.ndarray


def _power(values: np.ndarray, exponent: int) -> np.ndarray:
    if exponent == 0:
        return np.ones_like(values)
    return values ** exponent


def _as_output(result: np.ndarray, scalar: bool):
    return complex(result) if scalar else result


def geometric_sum(lam, n: int):
    """
    sum_{k=0}^{n-1} lam^k.

    Uses (1 - lam^n) / (1 - lam) away from lam = 1 and the first-order
    expansion n + (lam - 1) n (n - 1) / 2 when |1 - lam| <= 1e-8.
    """
    if n < 1:
        raise DomainError(f"geometric sum needs n >= 1, got {n}")
    scalar = np.ndim(lam) == 0
    lam = np.asarray(lam, dtype=np.complex128)
    gap = 1.0 - lam
    near = np.abs(gap) <= GEOMETRIC_SUM_EPS
    closed = (1.0 - _power(lam, n)) / np.where(near, 1.0, gap)
    expansion = n + (lam - 1.0) * (n * (n - 1) / 2.0)
    return _as_output(np.where(near, expansion, closed), scalar)


def geometric_sum_derivative(lam, n: int):
    """
    sum_{k=0}^{n-1} k lam^(k-1), the derivative of geometric_sum in lam.

    Closed form ((n-1) lam^n - n lam^(n-1) + 1) / (1 - lam)^2, with the
    expansion around lam = 1 used when |1 - lam| <= 1e-6.
    """
    if n < 1:
        raise DomainError(f"geometric sum needs n >= 1, got {n}")
    scalar = np.ndim(lam) == 0
    lam = np.asarray(lam, dtype=np.complex128)
    gap = 1.0 - lam
    near = np.abs(gap) <= GEOMETRIC_DERIVATIVE_EPS
    safe = np.where(near, 1.0, gap)
    closed = ((n - 1) * _power(lam, n) - n * _power(lam, n - 1) + 1.0) / (safe * safe)
    expansion = n * (n - 1) / 2.0 + (lam - 1.0) * (n * (n - 1) * (n - 2) / 3.0)
    return _as_output(np.where(near, expansion, closed), scalar)


def mean_angle(sched: FlipSchedule, start: int, stop: int) -> float:
    """
    Mean flip angle over the interval (start, stop], 1-based.

    That is the arithmetic mean of alpha_{start+1} .. alpha_{stop}.

    Raises:
        DomainError: If the interval is empty or leaves 1..L.
    """
    if stop <= start:
        raise DomainError(f"empty flip-angle interval ({start}, {stop}]")
    if start < 0 or stop > sched.length:
        raise DomainError(f"interval ({start}, {stop}] outside 1..{sched.length}")
    return float(np.mean(sched.angles[start:stop]))


def interval_plan(sched: FlipSchedule, grid: TemporalGrid) -> List[Tuple[int, float]]:
    """(width, mean angle) for every interval ending on a grid index."""
    if grid.length != sched.length:
        raise DomainError(
            f"grid built for L={grid.length} but schedule has L={sched.length}")
    plan = []
    start = 0
    for stop in grid.indices:
        plan.append((int(stop - start), mean_angle(sched, start, int(stop))))
        start = int(stop)
    return plan


def piecewise_constant_schedule(sched: FlipSchedule, grid: TemporalGrid) -> FlipSchedule:
    """
    The flip schedule with every grid interval replaced by its mean angle.

    Frames after the last grid index keep their original angles.
    """
    angles = sched.angles.copy()
    start = 0
    for width, angle in interval_plan(sched, grid):
        angles[start:start + width] = angle
        start += width
    return FlipSchedule(angles=angles, tr=sched.tr)


def _eigenvector_columns(lam: np.ndarray, e1: np.ndarray, e2: np.ndarray,
                         c: float, s: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigenvectors of B = E R_alpha in its original basis.

    The two block eigenvectors come from whichever of the two rows of
    (B - mu I) restricted to (y, z) gives the longer null vector.
    """
    n_voxels = lam.shape[0]
    W = np.zeros((n_voxels, 3, 3), dtype=np.complex128)
    W[:, 0, 2] = 1.0
    degenerate = np.zeros(n_voxels, dtype=bool)
    for k in (0, 1):
        mu = lam[:, k]
        first = np.stack([e1 * s + 0j, mu - e1 * c], axis=-1)
        second = np.stack([e2 * c - mu, e2 * s + 0j], axis=-1)
        first_norm = np.linalg.norm(first, axis=-1)
        second_norm = np.linalg.norm(second, axis=-1)
        use_first = first_norm >= second_norm
        yz = np.where(use_first[:, None], first, second)
        norm = np.where(use_first, first_norm, second_norm)
        degenerate |= norm <= 1e-300
        W[:, 1:, k] = yz / np.where(norm > 1e-300, norm, 1.0)[:, None]
    return W, degenerate


def eigen_decompose(
    angle: float,
    u: Union[TissueBatch, TissueParams],
    tr: float,
    step_count: int = 1,
) -> CoarseStepOperator:
    """
    Spectral decomposition of A = V_omega (E R_alpha) V_omega^T.

    Args:
        angle: Interval mean flip angle (rad).
        u: Tissue parameters (single voxel or batch).
        tr: Repetition time (ms).
        step_count: Width N of the interval this operator advances.

    Returns:
        CoarseStepOperator; voxels with an eigenvalue gap below 1e-9
        (relative) are flagged in `defective`.
    """
    batch = TissueBatch.coerce(u)
    e1, e2 = relaxation_factors(batch.t1, batch.t2, tr)
    e1 = np.atleast_1d(e1)
    e2 = np.atleast_1d(e2)
    c, s = float(np.cos(angle)), float(np.sin(angle))

    half_trace = 0.5 * (e1 + e2) * c
    root = np.sqrt((half_trace * half_trace - e1 * e2).astype(np.complex128))
    lam = np.stack([half_trace + root, half_trace - root, e1.astype(np.complex128)], axis=-1)

    W, degenerate = _eigenvector_columns(lam, e1, e2, c, s)

    gaps = np.stack([np.abs(lam[:, 0] - lam[:, 1]),
                     np.abs(lam[:, 0] - lam[:, 2]),
                     np.abs(lam[:, 1] - lam[:, 2])], axis=-1).min(axis=-1)
    scale = np.abs(lam).max(axis=-1)
    defective = degenerate | (gaps < DEFECTIVE_GAP * scale)
    if np.any(defective):
        logger.debug("eigen_decompose: %d of %d voxels defective at angle %.6g",
                     int(defective.sum()), batch.size, angle)
        W = np.where(defective[:, None, None], np.eye(3, dtype=np.complex128), W)

    W_inv = np.linalg.inv(W)
    V = rotation_z(precession_phase(batch.omega, tr))
    Z = V @ W
    Z_inv = W_inv @ np.swapaxes(V, -1, -2)
    projectors = np.einsum("pri,pic->pirc", Z, Z_inv)

    A, b = transition_matrix(angle, batch.omega, batch.t1, batch.t2, tr)
    return CoarseStepOperator(
        eigenvalues=lam,
        projectors=projectors,
        interval_mean_angle=float(angle),
        step_count=int(step_count),
        b=b,
        transition=A,
        eigenvectors=Z,
        eigenvectors_inv=Z_inv,
        defective=defective,
        tissue=batch,
        tr=tr,
    )


def _discard_imaginary(values: np.ndarray, what: str, scale: float = 1.0,
                       skip: Optional[np.ndarray] = None) -> np.ndarray:
    """Real part of values; `skip` marks entries whose spectral result is replaced anyway."""
    if skip is not None and np.any(skip):
        values = np.where(skip.reshape(skip.shape + (1,) * (values.ndim - skip.ndim)), 0.0, values)
    residue = float(np.max(np.abs(values.imag))) if values.size else 0.0
    if residue > IMAG_ERROR * scale:
        raise NumericalConsistencyError(
            f"imaginary residue {residue:.3e} in {what} exceeds {IMAG_ERROR:g}")
    if residue > IMAG_TOLERANCE * scale:
        logger.warning("imaginary residue %.3e in %s above %.0e", residue, what, IMAG_TOLERANCE)
    return np.ascontiguousarray(values.real)


def _spectral_sums(op: CoarseStepOperator) -> Tuple[np.ndarray, np.ndarray]:
    """(A^N, sum_{k<N} A^k) assembled from the projectors, complex (P, 3, 3)."""
    n = op.step_count
    lam = op.eigenvalues
    power = np.einsum("pi,pirc->prc", _power(lam, n), op.projectors)
    accumulated = np.einsum("pi,pirc->prc", geometric_sum(lam, n), op.projectors)
    return power, accumulated


def _affine_power(A: np.ndarray, b: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """(A^n, sum_{k<n} A^k b) by repeated squaring of the augmented 4x4 map."""
    augmented = np.zeros(A.shape[:-2] + (4, 4))
    augmented[..., :3, :3] = A
    augmented[..., :3, 3] = b
    augmented[..., 3, 3] = 1.0
    powered = np.linalg.matrix_power(augmented, n)
    return powered[..., :3, :3], powered[..., :3, 3]


def coarse_step(op: CoarseStepOperator, m: np.ndarray) -> np.ndarray:
    """
    Advance states across one coarse interval.

    Args:
        op: Operator built for this interval's width N.
        m: States at the interval start, shape (P, 3) or (3,).

    Returns:
        m_{l+N} with the spectral imaginary residue discarded.

    Raises:
        NumericalConsistencyError: If the imaginary residue exceeds 1e-6.
    """
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), op.b.shape)
    power, accumulated = _spectral_sums(op)
    advanced = ((power @ m[..., None])[..., 0] + (accumulated @ op.b[..., None])[..., 0])
    result = _discard_imaginary(advanced, "coarse step state", skip=op.defective)

    if np.any(op.defective):
        idx = np.flatnonzero(op.defective)
        A_n, offset = _affine_power(op.transition[idx], op.b[idx], op.step_count)
        result[idx] = (A_n @ m[idx][..., None])[..., 0] + offset
    return result


def _relaxation_derivatives(batch: TissueBatch, tr: float) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """d E / d chi and d b / d chi for chi in (T1, T2)."""
    e1, e2 = relaxation_factors(batch.t1, batch.t2, tr)
    e1 = np.atleast_1d(e1)
    e2 = np.atleast_1d(e2)
    zero = np.zeros_like(e1)
    de2_dt1 = tr / (batch.t1 * batch.t1) * e2
    de1_dt2 = tr / (batch.t2 * batch.t2) * e1
    return {
        T1: (relaxation_matrix(zero, de2_dt1), -de2_dt1[:, None] * M_EQUILIBRIUM),
        T2: (relaxation_matrix(de1_dt2, zero), np.zeros((batch.size, 3))),
    }


def coarse_step_derivatives(
    op: CoarseStepOperator,
    u: Optional[Union[TissueBatch, TissueParams]] = None,
    tr: Optional[float] = None,
    wrt: Sequence[int] = ALL_PARAMETERS,
) -> CoarseStepDerivatives:
    """
    Derivatives of eigenvalues, projectors and b with respect to (T1, T2, omega).

    For chi in {T1, T2}, d lambda_i = y_i dB w_i and
    d w_i = sum_{j != i} w_j (y_j dB w_i) / (lambda_i - lambda_j), where w_i
    and y_i are the right and left eigenvectors of B (Y = W^-1). This gives
    d U_i = Z (F G_i - G_i F) Z^-1 with F_ji = (y_j dB w_i) / (lambda_i - lambda_j).
    For omega only Z = V_omega W moves: d lambda_i = 0 and
    d U_i = M U_i - U_i M with M = (d V_omega) V_omega^T.

    Args:
        op: Operator from eigen_decompose.
        u, tr: Defaults to the parameters the operator was built with.
        wrt: Parameter columns to fill; others stay zero.

    Returns:
        CoarseStepDerivatives. Entries of defective voxels are meaningless.
    """
    batch = op.tissue if u is None else TissueBatch.coerce(u)
    tr = op.tr if tr is None else tr
    n_voxels = batch.size
    lam = op.eigenvalues

    dlambda = np.zeros((n_voxels, 3, 3), dtype=np.complex128)
    dU = np.zeros((n_voxels, 3, 3, 3, 3), dtype=np.complex128)
    db = np.zeros((n_voxels, 3, 3))

    V = rotation_z(precession_phase(batch.omega, tr))
    Vt = np.swapaxes(V, -1, -2)
    W = Vt @ op.eigenvectors
    W_inv = op.eigenvectors_inv @ V
    R = rotation_x(op.interval_mean_angle)

    relaxation = _relaxation_derivatives(batch, tr)
    eye = np.eye(3)
    # diff[p, j, i] = lambda_i - lambda_j
    diff = lam[:, None, :] - lam[:, :, None]
    safe_diff = np.where(eye.astype(bool), 1.0, diff)
    safe_diff = np.where(op.defective[:, None, None], 1.0, safe_diff)
    # K[i, r, c] = delta(c, i) - delta(r, i), so F * K_i = F G_i - G_i F
    commutator_mask = eye[:, None, :] - eye[:, :, None]
    Z = op.eigenvectors[:, None]
    Z_inv = op.eigenvectors_inv[:, None]

    for chi in wrt:
        if chi == OMEGA:
            dV = phase_rate(tr) * rotation_z_derivative(precession_phase(batch.omega, tr))
            M = (dV @ Vt)[:, None]
            dU[:, chi] = M @ op.projectors - op.projectors @ M
            continue
        dE, db_chi = relaxation[chi]
        coupling = W_inv @ (dE @ R) @ W
        dlambda[:, chi] = np.diagonal(coupling, axis1=-2, axis2=-1)
        F = np.where(eye.astype(bool), 0.0, coupling / safe_diff)
        dU[:, chi] = Z @ (F[:, None] * commutator_mask) @ Z_inv
        db[:, chi] = db_chi

    return CoarseStepDerivatives(dlambda=dlambda, dU=dU, db=db, defective=op.defective)


def power_derivative(op: CoarseStepOperator, derivs: CoarseStepDerivatives,
                     chi: int, k: int) -> np.ndarray:
    """d(A^k)/d chi = sum_i k lambda_i^(k-1) d lambda_i U_i + lambda_i^k d U_i."""
    lam = op.eigenvalues
    weights = k * _power(lam, max(k - 1, 0)) * derivs.dlambda[:, chi] if k > 0 else np.zeros_like(lam)
    return (np.einsum("pi,pirc->prc", weights, op.projectors)
            + np.einsum("pi,pirc->prc", _power(lam, k), derivs.dU[:, chi]))


# --- batched interval maps in the precessing frame ----------------------------


@dataclass(frozen=True)
class IntervalMaps:
    """
    Affine maps (m_y, m_z) -> linear @ (m_y, m_z) + offset in the frame
    precessing with V_omega, with their relaxation derivatives.

    Attributes:
        linear: K^N, shape (..., 2, 2).
        offset: sum_{k<N} K^k b, shape (..., 2).
        d_linear: d K^N / d chi, shape (..., C, 2, 2) over the C relaxation columns.
        d_offset: d offset / d chi, shape (..., C, 2).
    """
    linear: np.ndarray
    offset: np.ndarray
    d_linear: np.ndarray
    d_offset: np.ndarray

    def after(self, inner: "IntervalMaps") -> "IntervalMaps":
        """The map applying `inner` first, then self."""
        outer_linear = self.linear[..., None, :, :]
        return IntervalMaps(
            linear=self.linear @ inner.linear,
            offset=(self.linear @ inner.offset[..., None])[..., 0] + self.offset,
            d_linear=self.d_linear @ inner.linear[..., None, :, :] + outer_linear @ inner.d_linear,
            d_offset=((self.d_linear @ inner.offset[..., None, :, None])[..., 0]
                      + (outer_linear @ inner.d_offset[..., None])[..., 0]
                      + self.d_offset),
        )

    def where(self, mask: np.ndarray, other: "IntervalMaps") -> "IntervalMaps":
        """Rows of self where mask (shape of the leading axes) holds, else of other."""
        def pick(a, b):
            return np.where(mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim)), a, b)
        return IntervalMaps(pick(self.linear, other.linear), pick(self.offset, other.offset),
                            pick(self.d_linear, other.d_linear), pick(self.d_offset, other.d_offset))


def _relaxation_scalings(batch: TissueBatch, tr: float,
                         relax: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    d log(e1) and d log(e2) per relaxation column, each shape (C, P).

    E scales the y row of K by e1 and the z row by e2, so d K / d chi is K
    with its rows scaled by these.
    """
    zero = np.zeros(batch.size)
    log_e1 = {T1: zero, T2: tr / (batch.t2 * batch.t2)}
    log_e2 = {T1: tr / (batch.t1 * batch.t1), T2: zero}
    shape = (len(relax), batch.size)
    return (np.array([log_e1[chi] for chi in relax]).reshape(shape),
            np.array([log_e2[chi] for chi in relax]).reshape(shape))


def _powered_maps(base: IntervalMaps, n: np.ndarray) -> IntervalMaps:
    """base^n row by row (n >= 1) by binary powering."""
    result = base
    square = base
    remaining = n - 1
    while np.any(remaining > 0):
        take = (remaining & 1).astype(bool)
        if np.any(take):
            result = square.after(result).where(take, result)
        remaining = remaining >> 1
        if np.any(remaining > 0):
            square = square.after(square)
    return result


def _interval_maps(
    e1: np.ndarray,
    e2: np.ndarray,
    log_e1: np.ndarray,
    log_e2: np.ndarray,
    angles: np.ndarray,
    widths: np.ndarray,
) -> IntervalMaps:
    """
    Interval maps for J intervals and P voxels, leading axes (J, P).

    K = [[e1 c, e1 s], [-e2 s, e2 c]] has trace 2h and determinant p = e1 e2,
    so K^n = a_n K - p a_{n-1} I where a_n = (lambda_+^n - lambda_-^n) /
    (lambda_+ - lambda_-) and lambda_+- = h +- sqrt(h^2 - p). The offset is
    (I - K^n)(I - K)^-1 b. With g_n = lambda_+^n + lambda_-^n:

        d a_n / d h = (n g_n - 2 h a_n) / (2 (h^2 - p))
        d a_n / d p = (2 a_n - n g_{n-1}) / (4 (h^2 - p))

    Rows with |h^2 - p| <= COALESCENCE_GAP p are rebuilt by binary powering.
    Width-1 rows reduce to K and b exactly.
    """
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    n = widths[:, None]
    relaxing = log_e1.shape[0]
    rows = (angles.shape[0], e1.shape[0])

    k00, k01 = e1 * c, e1 * s
    k10, k11 = -e2 * s, e2 * c
    recharge = 1.0 - e2
    p = e1 * e2
    h = 0.5 * (k00 + k11)
    discriminant = h * h - p
    coalescent = np.abs(discriminant) <= COALESCENCE_GAP * p
    safe_discriminant = np.where(coalescent, -p, discriminant)

    root = np.sqrt(safe_discriminant.astype(np.complex128))
    lam_plus, lam_minus = h + root, h - root
    gap = lam_plus - lam_minus
    pow_plus, pow_minus = lam_plus ** n, lam_minus ** n
    alpha = _discard_imaginary((pow_plus - pow_minus) / gap, "interval power", skip=coalescent)
    # 1/lambda_+- = lambda_-+/p
    alpha_prev = _discard_imaginary((pow_plus * lam_minus - pow_minus * lam_plus) / (p * gap),
                                    "interval power", skip=coalescent)
    shift = p * alpha_prev

    linear = np.empty(rows + (2, 2))
    linear[..., 0, 0] = alpha * k00 - shift
    linear[..., 0, 1] = alpha * k01
    linear[..., 1, 0] = alpha * k10
    linear[..., 1, 1] = alpha * k11 - shift

    det = (1.0 - k00) * (1.0 - k11) - k01 * k10
    x0 = k01 * recharge / det
    x1 = (1.0 - k00) * recharge / det
    single = n == 1
    offset = np.empty(rows + (2,))
    offset[..., 0] = np.where(single, 0.0, x0 - linear[..., 0, 0] * x0 - linear[..., 0, 1] * x1)
    offset[..., 1] = np.where(single, recharge,
                              x1 - linear[..., 1, 0] * x0 - linear[..., 1, 1] * x1)

    d_linear = np.empty(rows + (relaxing, 2, 2))
    d_offset = np.empty(rows + (relaxing, 2))
    if relaxing:
        gamma = 2.0 * h * alpha - 2.0 * shift
        gamma_prev = 2.0 * alpha - 2.0 * h * alpha_prev
        alpha_prev2 = (2.0 * h * alpha_prev - alpha) / p
        gamma_prev2 = 2.0 * alpha_prev - 2.0 * h * alpha_prev2
        alpha_h = (n * gamma - 2.0 * h * alpha) / (2.0 * safe_discriminant)
        alpha_p = (2.0 * alpha - n * gamma_prev) / (4.0 * safe_discriminant)
        prev_h = ((n - 1) * gamma_prev - 2.0 * h * alpha_prev) / (2.0 * safe_discriminant)
        prev_p = (2.0 * alpha_prev - (n - 1) * gamma_prev2) / (4.0 * safe_discriminant)
        kx0 = k00 * x0 + k01 * x1
        kx1 = k10 * x0 + k11 * x1

        for col in range(relaxing):
            sy, sz = log_e1[col], log_e2[col]
            dh = 0.5 * (sy * k00 + sz * k11)
            dp = (sy + sz) * p
            d_alpha = alpha_h * dh + alpha_p * dp
            d_shift = dp * alpha_prev + p * (prev_h * dh + prev_p * dp)
            row_y = d_alpha + alpha * sy
            row_z = d_alpha + alpha * sz
            d00 = row_y * k00 - d_shift
            d01 = row_y * k01
            d10 = row_z * k10
            d11 = row_z * k11 - d_shift
            d_linear[..., col, 0, 0] = d00
            d_linear[..., col, 0, 1] = d01
            d_linear[..., col, 1, 0] = d10
            d_linear[..., col, 1, 1] = d11

            # d x = (I - K)^-1 (dK x + db), db = (0, -sz e2)
            v0 = sy * kx0
            v1 = sz * (kx1 - e2)
            dx0 = ((1.0 - k11) * v0 + k01 * v1) / det
            dx1 = (k10 * v0 + (1.0 - k00) * v1) / det
            dq0 = dx0 - d00 * x0 - d01 * x1 - linear[..., 0, 0] * dx0 - linear[..., 0, 1] * dx1
            dq1 = dx1 - d10 * x0 - d11 * x1 - linear[..., 1, 0] * dx0 - linear[..., 1, 1] * dx1
            d_offset[..., col, 0] = np.where(single, 0.0, dq0)
            d_offset[..., col, 1] = np.where(single, -sz * e2, dq1)

    maps = IntervalMaps(linear, offset, d_linear, d_offset)
    if np.any(coalescent):
        maps = _replace_coalescent(maps, coalescent, k00, k01, k10, k11, recharge,
                                   e2, log_e1, log_e2, n)
    return maps


def _replace_coalescent(maps: IntervalMaps, coalescent: np.ndarray, k00, k01, k10, k11,
                        recharge, e2, log_e1, log_e2, n) -> IntervalMaps:
    """Rebuild the rows whose pair eigenvalues (nearly) coincide by binary powering."""
    ji, pi = np.nonzero(coalescent)
    logger.debug("interval maps: %d coalescent rows rebuilt by powering", ji.size)
    def pick(a):
        return np.broadcast_to(a, coalescent.shape)[ji, pi]

    K = np.stack([np.stack([pick(k00), pick(k01)], axis=-1),
                  np.stack([pick(k10), pick(k11)], axis=-1)], axis=-2)
    b = np.stack([np.zeros(ji.size), recharge[pi]], axis=-1)
    sy, sz = log_e1[:, pi].T, log_e2[:, pi].T
    dK = np.stack([sy, sz], axis=-1)[..., None] * K[:, None]
    db = np.stack([np.zeros_like(sz), -sz * e2[pi][:, None]], axis=-1)
    powered = _powered_maps(IntervalMaps(K, b, dK, db), pick(n))

    linear, offset = maps.linear.copy(), maps.offset.copy()
    d_linear, d_offset = maps.d_linear.copy(), maps.d_offset.copy()
    linear[ji, pi] = powered.linear
    offset[ji, pi] = powered.offset
    d_linear[ji, pi] = powered.d_linear
    d_offset[ji, pi] = powered.d_offset
    return IntervalMaps(linear, offset, d_linear, d_offset)


def _laboratory_frame(
    trajectory: np.ndarray,
    batch: TissueBatch,
    tr: float,
    wrt: Sequence[int],
    relax: Sequence[int],
    with_derivatives: bool,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Rotate the precessing-frame trajectory (J, P, 2, 1 + C) back by V_omega."""
    phi = precession_phase(batch.omega, tr)
    cos_phi, sin_phi = np.cos(phi), np.sin(phi)

    def rotate(yz: np.ndarray) -> np.ndarray:
        y, z = yz[..., 0], yz[..., 1]
        return np.swapaxes(np.stack([sin_phi * y, cos_phi * y, z], axis=-1), 0, 1)

    states = np.ascontiguousarray(rotate(trajectory[..., 0]))
    if not with_derivatives:
        return states, None
    jacobians = np.zeros(states.shape + (3,))
    for col, chi in enumerate(relax):
        jacobians[..., chi] = rotate(trajectory[..., 1 + col])
    if OMEGA in wrt:
        # d m / d omega = rate (d V / d phi) V^T m = rate (m_y, -m_x, 0)
        rate = phase_rate(tr)
        jacobians[..., 0, OMEGA] = rate * states[..., 1]
        jacobians[..., 1, OMEGA] = -rate * states[..., 0]
    return states, jacobians


def simulate_multiscale_batch(
    u: Union[TissueBatch, TissueParams],
    sched: FlipSchedule,
    grid: TemporalGrid,
    with_derivatives: bool = False,
    wrt: Sequence[int] = ALL_PARAMETERS,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Multiscale Bloch responses (and Jacobians) at the grid indices.

    Starting from m_0, the first interval has width delta and mean angle over
    alpha_1..alpha_delta; every later interval has width N. Interval maps
    are built for up to ROW_BLOCK interval-voxel rows at a time and every
    width goes through the same closed form, so the cost is proportional to
    |S|. On S_1(1) the maps are the exact transition matrices.

    Args:
        u: Tissue parameters, P voxels.
        sched: Flip schedule.
        grid: Temporal grid for sched.length.
        with_derivatives: Also propagate d m / d(T1, T2, omega).
        wrt: Jacobian columns to propagate (others stay zero).

    Returns:
        (states, jacobians) with shapes (P, |S|, 3) and (P, |S|, 3, 3) where
        jacobians[p, j, :, chi] = d m / d chi; jacobians is None without derivatives.
    """
    batch = TissueBatch.coerce(u)
    plan = interval_plan(sched, grid)
    widths = np.array([width for width, _ in plan], dtype=np.int64)
    angles = np.array([angle for _, angle in plan], dtype=np.float64)
    wrt = tuple(wrt) if with_derivatives else ()
    relax = tuple(chi for chi in (T1, T2) if chi in wrt)
    n_voxels = batch.size

    e1, e2 = relaxation_factors(batch.t1, batch.t2, sched.tr)
    e1, e2 = np.atleast_1d(e1), np.atleast_1d(e2)
    log_e1, log_e2 = _relaxation_scalings(batch, sched.tr, relax)

    # columns: state, then d state / d chi for chi in relax
    trajectory = np.empty((grid.size, n_voxels, 2, 1 + len(relax)))
    X = np.zeros((n_voxels, 2, 1 + len(relax)))
    X[:, :, 0] = M_INITIAL[1:]
    block = max(1, ROW_BLOCK // n_voxels)
    for start in range(0, grid.size, block):
        stop = min(start + block, grid.size)
        maps = _interval_maps(e1, e2, log_e1, log_e2, angles[start:stop], widths[start:stop])
        for j in range(stop - start):
            if relax:
                drift = (maps.d_linear[j] @ X[:, None, :, :1])[..., 0] + maps.d_offset[j]
            X = maps.linear[j] @ X
            X[:, :, 0] += maps.offset[j]
            if relax:
                X[:, :, 1:] += np.swapaxes(drift, -1, -2)
            trajectory[start + j] = X
    return _laboratory_frame(trajectory, batch, sched.tr, wrt, relax, with_derivatives)


def simulate_multiscale(u: TissueParams, sched: FlipSchedule, grid: TemporalGrid) -> np.ndarray:
    """Multiscale Bloch response of one voxel, shape (|S|, 3)."""
    states, _ = simulate_multiscale_batch(u, sched, grid)
    return states[0]


def simulate_multiscale_with_derivatives(
    u: TissueParams,
    sched: FlipSchedule,
    grid: TemporalGrid,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Multiscale response and Jacobian of one voxel.

    Returns:
        (states (|S|, 3), jacobians (|S|, 3, 3)); jacobian columns are
        (d/dT1, d/dT2, d/domega) and m'_0 = 0.
    """
    states, jacobians = simulate_multiscale_batch(u, sched, grid, with_derivatives=True)
    return states[0], jacobians[0]
