"""
Projected Coordinate Descent with Backtracking (PCDB) and Coarse-to-Fine (C2F)

PCDB cycles through the parameter channels (rho, T1, T2, omega) in a fixed
Gauss-Seidel order. Each channel takes a projected gradient step on the
multiscale objective F_S, where S = S_N(delta) with a fresh random offset
delta per iteration, and accepts it once the sufficient-decrease test

    F_S(x') <= F_S(x) + <grad_i, d_i> + ||d_i||^2 / (2 tau_i)

holds. C2F runs PCDB over a strictly decreasing sequence of grid increments,
carrying the parameter maps and step sizes from one stage to the next.

Cost is counted in fine-equivalent gradients: one gradient on S_N(delta)
costs floor(L/N)/L. Objective re-evaluations during backtracking are
counted separately.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import DomainError, NumericalError
from .mri_operator import (
    ALL_CHANNELS,
    CHANNEL_NAMES,
    AcquisitionData,
    MultiscaleForwardModel,
    ParameterMaps,
)
from .multiscale_bloch import TemporalGrid

logger = logging.getLogger(__name__)

DEFAULT_FLOORS: Tuple[float, float, float, float] = (0.0, 1.0, 1.0, -math.inf)
EXHAUSTION_POLICIES = ("revert", "accept_last")

TRACE_COLUMNS: Tuple[str, ...] = (
    "iter", "stage_j", "N", "delta", "channel", "trials", "accepted",
    "tau_rho", "tau_t1", "tau_t2", "tau_omega", "f_S", "f_true", "cum_cost",
)


@dataclass
class StepSizes:
    """Per-channel step sizes tau = (tau_rho, tau_T1, tau_T2, tau_omega), all > 0."""
    tau: np.ndarray

    def __post_init__(self):
        tau = np.array(self.tau, dtype=np.float64).reshape(-1)
        if tau.shape != (4,):
            raise DomainError(f"step sizes need 4 entries, got {tau.size}")
        if not np.all(np.isfinite(tau) & (tau > 0)):
            raise DomainError(f"step sizes must be positive and finite, got {tau.tolist()}")
        self.tau = tau

    def copy(self) -> "StepSizes":
        return StepSizes(self.tau.copy())

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return tuple(float(t) for t in self.tau)


@dataclass(frozen=True)
class BacktrackConfig:
    """
    Backtracking and projection settings.

    Attributes:
        max_trials: Trials C per channel and iteration.
        grow: Factor applied to tau after an accepted step (> 1).
        shrink: Factor applied to tau after each rejected trial (in (0, 1)).
        floors: Lower bounds theta per channel; -inf disables projection.
        on_exhaustion: "revert" restores the channel after C rejections,
            "accept_last" keeps the last rejected trial.
    """
    max_trials: int = 50
    grow: float = 1.2
    shrink: float = 0.75
    floors: Tuple[float, float, float, float] = DEFAULT_FLOORS
    on_exhaustion: str = "revert"

    def __post_init__(self):
        if self.max_trials < 1:
            raise DomainError(f"max_trials must be >= 1, got {self.max_trials}")
        if not (self.grow > 1.0 > self.shrink > 0.0):
            raise DomainError(
                f"need grow > 1 > shrink > 0, got grow={self.grow}, shrink={self.shrink}")
        if len(self.floors) != 4:
            raise DomainError(f"floors need 4 entries, got {len(self.floors)}")
        if self.on_exhaustion not in EXHAUSTION_POLICIES:
            raise DomainError(
                f"on_exhaustion must be one of {EXHAUSTION_POLICIES}, got {self.on_exhaustion!r}")
        object.__setattr__(self, "floors", tuple(float(f) for f in self.floors))

    def to_dict(self) -> Dict:
        return {
            "max_trials": self.max_trials,
            "grow": self.grow,
            "shrink": self.shrink,
            "floors": [None if math.isinf(f) else f for f in self.floors],
            "on_exhaustion": self.on_exhaustion,
        }


@dataclass(frozen=True)
class C2FSchedule:
    """
    Coarse-to-fine schedule: K_j PCDB iterations on increment N_j.

    Attributes:
        increments: Strictly decreasing positive grid increments N.
        iterations: Positive iteration counts K, one per increment.
    """
    increments: Tuple[int, ...]
    iterations: Tuple[int, ...]

    def __post_init__(self):
        increments = tuple(int(n) for n in self.increments)
        iterations = tuple(int(k) for k in self.iterations)
        if not increments or len(increments) != len(iterations):
            raise DomainError(
                f"N and K must be non-empty and of equal length, got {increments} and {iterations}")
        if any(n < 1 for n in increments) or any(k < 1 for k in iterations):
            raise DomainError("grid increments and iteration counts must be positive")
        if any(a <= b for a, b in zip(increments, increments[1:])):
            raise DomainError(f"grid increments must be strictly decreasing, got {increments}")
        object.__setattr__(self, "increments", increments)
        object.__setattr__(self, "iterations", iterations)

    @classmethod
    def fine(cls, iterations: int) -> "C2FSchedule":
        """FINE: a single stage with N = 1."""
        return cls(increments=(1,), iterations=(iterations,))

    @property
    def stages(self) -> int:
        return len(self.increments)

    def nominal_budget(self) -> Fraction:
        """sum_j K_j / N_j."""
        return sum((Fraction(k, n) for n, k in zip(self.increments, self.iterations)), Fraction(0))

    def fine_equivalent_budget(self, length: int) -> Fraction:
        """sum_j K_j * floor(L / N_j) / L, the cost the trace will accumulate."""
        return sum((Fraction(k * (length // n), length)
                    for n, k in zip(self.increments, self.iterations)), Fraction(0))


@dataclass
class TraceRow:
    """One channel update of one PCDB iteration."""
    iteration: int
    stage: int
    increment: int
    offset: int
    channel: str
    trials: int
    accepted: bool
    tau: Tuple[float, float, float, float]
    f_s: float
    f_true: Optional[float]
    cum_cost: Fraction


@dataclass
class IterationTrace:
    """
    Append-only record of a PCDB / C2F run.

    Attributes:
        rows: One row per (iteration, channel).
        refinements: Iteration numbers at which a new C2F stage starts.
        objective_evaluations: Backtracking objective evaluations.
        objective_cost: Their fine-equivalent cost, excluded from cum_cost.
        header: Run settings recorded alongside the CSV.
    """
    rows: List[TraceRow] = field(default_factory=list)
    refinements: List[int] = field(default_factory=list)
    objective_evaluations: int = 0
    objective_cost: Fraction = Fraction(0)
    header: Dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return self.rows[-1].iteration if self.rows else 0

    @property
    def final_cost(self) -> Fraction:
        return self.rows[-1].cum_cost if self.rows else Fraction(0)

    @property
    def final_f_true(self) -> Optional[float]:
        for row in reversed(self.rows):
            if row.f_true is not None:
                return row.f_true
        return None

    def iteration_values(self) -> List[Tuple[int, float]]:
        """(iteration, F_S after its last channel update)."""
        last: Dict[int, float] = {}
        for row in self.rows:
            last[row.iteration] = row.f_s
        return sorted(last.items())

    def true_values(self) -> List[Tuple[Fraction, float]]:
        """(cumulative cost, F) wherever the true objective was evaluated."""
        return [(row.cum_cost, row.f_true) for row in self.rows if row.f_true is not None]

    def extend(self, other: "IterationTrace", stage: int) -> None:
        """Append a stage trace, renumbering its iterations and offsetting its cost."""
        iteration_offset = self.iterations
        cost_offset = self.final_cost
        self.refinements.append(iteration_offset + 1)
        for row in other.rows:
            self.rows.append(TraceRow(
                iteration=row.iteration + iteration_offset,
                stage=stage,
                increment=row.increment,
                offset=row.offset,
                channel=row.channel,
                trials=row.trials,
                accepted=row.accepted,
                tau=row.tau,
                f_s=row.f_s,
                f_true=row.f_true,
                cum_cost=row.cum_cost + cost_offset,
            ))
        self.objective_evaluations += other.objective_evaluations
        self.objective_cost += other.objective_cost

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in self.rows:
            writer.writerow([
                row.iteration, row.stage, row.increment, row.offset, row.channel,
                row.trials, int(row.accepted),
                *(repr(t) for t in row.tau),
                repr(row.f_s),
                "" if row.f_true is None else repr(row.f_true),
                repr(float(row.cum_cost)),
            ])
        return buffer.getvalue()

    def header_dict(self) -> Dict:
        return {
            **self.header,
            "columns": list(TRACE_COLUMNS),
            "iterations": self.iterations,
            "refinements": list(self.refinements),
            "final_cost": str(self.final_cost),
            "objective_evaluations": self.objective_evaluations,
            "objective_cost": str(self.objective_cost),
        }


def backtrack_condition(f_new: float, f_old: float, grad_i: np.ndarray,
                        delta_i: np.ndarray, tau_i: float) -> bool:
    """
    Sufficient-decrease test for one channel step.

    Returns:
        f_new <= f_old + <grad_i, delta_i> + ||delta_i||^2 / (2 tau_i).

    Example:
        >>> backtrack_condition(0.0, 0.5, np.array([1.0]), np.array([-1.0]), 1.0)
        True
    """
    if not tau_i > 0:
        raise DomainError(f"tau must be positive, got {tau_i}")
    grad_i = np.asarray(grad_i, dtype=np.float64)
    delta_i = np.asarray(delta_i, dtype=np.float64)
    bound = f_old + float(np.vdot(grad_i, delta_i)) + float(np.vdot(delta_i, delta_i)) / (2.0 * tau_i)
    return f_new <= bound


def project_channel(values: np.ndarray, floor: float) -> np.ndarray:
    """Pixelwise max(values, floor); a floor of -inf leaves values unchanged."""
    values = np.asarray(values, dtype=np.float64)
    if floor == -math.inf:
        return values.copy()
    return np.maximum(values, floor)


def _as_model(data: Union[AcquisitionData, MultiscaleForwardModel]):
    if isinstance(data, AcquisitionData):
        return MultiscaleForwardModel(data)
    return data


def _check_finite(value: float, what: str, trace: IterationTrace) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite objective ({value}) at {what}", trace=trace)


def pcdb(
    x0: ParameterMaps,
    tau0: StepSizes,
    N: int,
    K: int,
    data,
    cfg: BacktrackConfig,
    rng: np.random.Generator,
    true_objective_every: int = 0,
) -> Tuple[ParameterMaps, StepSizes, IterationTrace]:
    """
    Projected coordinate descent with backtracking on S_N(delta).

    Args:
        x0: Initial parameter maps.
        tau0: Initial step sizes.
        N: Grid increment (<= L).
        K: Iterations (>= 1).
        data: AcquisitionData, or a forward model exposing `length`,
            `objective`, `gradient` and `true_objective`.
        cfg: Backtracking settings.
        rng: Generator for the grid offsets delta.
        true_objective_every: Evaluate F on S_1(1) every this many
            iterations (0 disables); the final iterate is always evaluated.

    Returns:
        (final maps, final step sizes, trace).

    Raises:
        DomainError: If K < 1 or N > L.
        NumericalError: If a non-finite objective appears; carries the trace.
    """
    model = _as_model(data)
    length = model.length
    if K < 1:
        raise DomainError(f"PCDB needs K >= 1, got {K}")
    if not 1 <= N <= length:
        raise DomainError(f"grid increment N={N} must lie in 1..{length}")

    x = x0.copy()
    tau = tau0.tau.copy()
    trace = IterationTrace(header={
        "backtracking": cfg.to_dict(),
        "channel_order": list(CHANNEL_NAMES),
        "length": length,
    })
    step_cost = Fraction(length // N, length)
    cum_cost = Fraction(0)

    for k in range(1, K + 1):
        delta = int(rng.integers(1, N + 1))
        grid = TemporalGrid(N, delta, length)
        cum_cost += step_cost
        iteration_rows = []

        for i in ALL_CHANNELS:
            report = model.gradient(x, grid, channels=(i,))
            f_old = report.value
            _check_finite(f_old, f"iteration {k}, channel {CHANNEL_NAMES[i]}", trace)
            grad_i = report.gradient[i]
            old = x.channel(i).copy()

            accepted = False
            trials = 0
            f_new = f_old
            candidate = x
            while trials < cfg.max_trials:
                trials += 1
                trial = project_channel(old - tau[i] * grad_i, cfg.floors[i])
                candidate = x.with_channel(i, trial)
                f_new = model.objective(candidate, grid).value
                trace.objective_evaluations += 1
                trace.objective_cost += step_cost
                _check_finite(f_new, f"iteration {k}, channel {CHANNEL_NAMES[i]}, trial {trials}", trace)
                if backtrack_condition(f_new, f_old, grad_i, trial - old, tau[i]):
                    accepted = True
                    break
                tau[i] *= cfg.shrink

            if accepted:
                x = candidate
                tau[i] *= cfg.grow
                f_current = f_new
            else:
                logger.warning("Backtracking exhausted after %d trials (iteration %d, channel %s); %s",
                               trials, k, CHANNEL_NAMES[i],
                               "keeping last trial" if cfg.on_exhaustion == "accept_last" else "reverting")
                if cfg.on_exhaustion == "accept_last":
                    x = candidate
                    f_current = f_new
                else:
                    f_current = f_old

            row = TraceRow(
                iteration=k, stage=1, increment=N, offset=delta, channel=CHANNEL_NAMES[i],
                trials=trials, accepted=accepted, tau=tuple(float(t) for t in tau),
                f_s=float(f_current), f_true=None, cum_cost=cum_cost,
            )
            iteration_rows.append(row)
            trace.rows.append(row)

        if k == K or (true_objective_every and k % true_objective_every == 0):
            f_true = model.true_objective(x)
            _check_finite(f_true, f"iteration {k} (true objective)", trace)
            iteration_rows[-1].f_true = float(f_true)

        logger.debug("PCDB N=%d iter %d delta=%d F_S=%.6e tau=%s",
                     N, k, delta, iteration_rows[-1].f_s, np.array2string(tau, precision=3))

    return x, StepSizes(tau), trace


def c2f(
    x0: ParameterMaps,
    tau0: StepSizes,
    sched: C2FSchedule,
    data,
    cfg: BacktrackConfig,
    rng: np.random.Generator,
    true_objective_every: int = 0,
) -> Tuple[ParameterMaps, IterationTrace]:
    """
    Coarse-to-fine: PCDB with (N_j, K_j) for j = 1..J.

    Maps and step sizes carry from stage to stage; the stage traces are
    concatenated and every stage start is recorded in `refinements`.

    Returns:
        (final maps, trace). The final step sizes are the tau columns of the
        trace's last row.
    """
    model = _as_model(data)
    x = x0.copy()
    tau = tau0.copy()
    trace = IterationTrace(header={
        "backtracking": cfg.to_dict(),
        "channel_order": list(CHANNEL_NAMES),
        "length": model.length,
        "increments": list(sched.increments),
        "iterations_per_stage": list(sched.iterations),
        "nominal_budget": str(sched.nominal_budget()),
        "fine_equivalent_budget": str(sched.fine_equivalent_budget(model.length)),
        "tau0": list(tau0.as_tuple()),
    })

    for j, (N, K) in enumerate(zip(sched.increments, sched.iterations), start=1):
        logger.info("C2F stage %d/%d: N=%d, K=%d", j, sched.stages, N, K)
        try:
            x, tau, stage_trace = pcdb(x, tau, N, K, model, cfg, rng, true_objective_every)
        except NumericalError as e:
            if isinstance(e.trace, IterationTrace):
                trace.extend(e.trace, stage=j)
            raise NumericalError(str(e), trace=trace) from e
        trace.extend(stage_trace, stage=j)
        logger.info("C2F stage %d done: F=%s, cost=%s",
                    j, stage_trace.final_f_true, trace.final_cost)
    return x, trace
