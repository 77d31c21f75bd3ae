"""Tests for PCDB and the coarse-to-fine schedule."""

import math
from fractions import Fraction

import numpy as np
import pytest

from core.bloch_model import TissueParams, synth_flip_schedule
from core.errors import DomainError, NumericalError
from core.experiment import make_epi_masks, make_phantom, simulate_acquisition
from core.mri_operator import MultiscaleForwardModel, ObjectiveReport, ParameterMaps
from core.optimizer import (
    TRACE_COLUMNS,
    BacktrackConfig,
    C2FSchedule,
    IterationTrace,
    StepSizes,
    backtrack_condition,
    c2f,
    pcdb,
    project_channel,
)
from core.utils import STREAM_GRID_OFFSETS, make_rng


class QuadraticModel:
    """F(x) = 0.5 ||x - target||^2, independent of the temporal grid."""

    def __init__(self, target: ParameterMaps, length: int = 1):
        self.target = target
        self.length = length
        self.calls = 0

    def objective(self, x, grid):
        self.calls += 1
        diff = x.values - self.target.values
        return ObjectiveReport(value=0.5 * float(np.sum(diff * diff)), grid=grid)

    def gradient(self, x, grid, channels=(0, 1, 2, 3)):
        report = self.objective(x, grid)
        grad = np.zeros_like(x.values)
        for i in channels:
            grad[i] = x.values[i] - self.target.values[i]
        report.gradient = grad
        return report

    def true_objective(self, x):
        return self.objective(x, None).value


class HostileModel(QuadraticModel):
    """Rejects every move: any change from the start point raises the objective."""

    def __init__(self, start: ParameterMaps):
        super().__init__(start)
        self.start = start

    def objective(self, x, grid):
        value = 1.0 if x == self.start else 2.0
        return ObjectiveReport(value=value, grid=grid)

    def gradient(self, x, grid, channels=(0, 1, 2, 3)):
        report = self.objective(x, grid)
        report.gradient = np.ones_like(x.values)
        return report


class NanModel(QuadraticModel):
    def objective(self, x, grid):
        return ObjectiveReport(value=math.nan, grid=grid)


def constant_maps(rho, t1, t2, omega, shape=(2, 2)):
    return ParameterMaps.from_channels(*(np.full(shape, v) for v in (rho, t1, t2, omega)))


# --- building blocks -------------------------------------------------------


def test_backtrack_condition_examples():
    assert backtrack_condition(0.0, 0.5, np.array([1.0]), np.array([-1.0]), 1.0)
    assert not backtrack_condition(0.5, 0.5, np.array([1.0]), np.array([-2.0]), 2.0)
    assert backtrack_condition(0.5, 0.5, np.array([1.0]), np.array([0.0]), 1.0)


def test_backtrack_condition_rejects_non_positive_tau():
    with pytest.raises(DomainError):
        backtrack_condition(0.0, 0.5, np.array([1.0]), np.array([-1.0]), 0.0)


def test_projection():
    np.testing.assert_array_equal(project_channel(np.array([0.5, 2.0]), 1.0), [1.0, 2.0])
    values = np.array([-3.0, 4.0])
    np.testing.assert_array_equal(project_channel(values, -math.inf), values)
    once = project_channel(np.array([-1.0, 0.2, 5.0]), 0.0)
    np.testing.assert_array_equal(project_channel(once, 0.0), once)


def test_step_sizes_validation():
    assert StepSizes([0.1, 1e6, 1e5, 1e-8]).as_tuple() == (0.1, 1e6, 1e5, 1e-8)
    with pytest.raises(DomainError):
        StepSizes([0.1, 0.0, 1.0, 1.0])
    with pytest.raises(DomainError):
        StepSizes([0.1, 1.0, 1.0])


@pytest.mark.parametrize("kwargs", [
    {"max_trials": 0},
    {"grow": 1.0},
    {"shrink": 1.0},
    {"floors": (0.0, 1.0)},
    {"on_exhaustion": "retry"},
])
def test_backtrack_config_validation(kwargs):
    with pytest.raises(DomainError):
        BacktrackConfig(**kwargs)


def test_c2f_schedule_budgets():
    constant_start = C2FSchedule((16, 8, 4, 2, 1), (320, 320, 160, 100, 850))
    assert constant_start.nominal_budget() == Fraction(1000)
    assert constant_start.fine_equivalent_budget(800) == Fraction(1000)
    assert constant_start.fine_equivalent_budget(1000) == Fraction(99984, 100)
    blip = C2FSchedule((8, 4, 2, 1), (80, 400, 300, 740))
    assert blip.nominal_budget() == Fraction(1000)
    assert C2FSchedule.fine(1000).nominal_budget() == Fraction(1000)


@pytest.mark.parametrize("increments, iterations", [
    ((4, 4, 1), (1, 1, 1)),
    ((1, 2), (1, 1)),
    ((4, 2), (1,)),
    ((), ()),
    ((2, 0), (1, 1)),
    ((2, 1), (1, 0)),
])
def test_c2f_schedule_validation(increments, iterations):
    with pytest.raises(DomainError):
        C2FSchedule(increments, iterations)


# --- PCDB on a quadratic ----------------------------------------------------


def test_pcdb_converges_on_a_quadratic():
    target = constant_maps(0.5, 800.0, 80.0, -20.0)
    model = QuadraticModel(target)
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    x, tau, trace = pcdb(x0, StepSizes([0.1] * 4), 1, 200, model, BacktrackConfig(), np.random.default_rng(0))
    np.testing.assert_allclose(x.values, target.values, atol=1e-8)
    assert trace.iterations == 200
    assert len(trace.rows) == 800
    assert all(0.0 < t <= 1.2 for t in tau.as_tuple())


def test_pcdb_objective_is_monotone():
    model = QuadraticModel(constant_maps(0.5, 800.0, 80.0, -20.0))
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    _, _, trace = pcdb(x0, StepSizes([0.3] * 4), 1, 30, model, BacktrackConfig(), np.random.default_rng(0))
    values = [row.f_s for row in trace.rows]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_pcdb_respects_floors():
    target = constant_maps(-0.2, 0.5, 0.25, -20.0)
    model = QuadraticModel(target)
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    x, _, _ = pcdb(x0, StepSizes([0.5] * 4), 1, 100, model, BacktrackConfig(), np.random.default_rng(0))
    np.testing.assert_array_equal(x.rho, 0.0)
    np.testing.assert_array_equal(x.t1, 1.0)
    np.testing.assert_array_equal(x.t2, 1.0)
    np.testing.assert_allclose(x.omega, -20.0, atol=1e-8)


def test_pcdb_step_sizes_adapt():
    model = QuadraticModel(constant_maps(0.5, 800.0, 80.0, -20.0))
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    cfg = BacktrackConfig(grow=1.5, shrink=0.5)
    # tau = 4 fails until halved to 1, then grows by 1.5
    _, tau, trace = pcdb(x0, StepSizes([4.0] * 4), 1, 1, model, cfg, np.random.default_rng(0))
    assert [row.trials for row in trace.rows] == [3, 3, 3, 3]
    np.testing.assert_allclose(tau.tau, 1.5)


def test_pcdb_reverts_on_exhaustion():
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    cfg = BacktrackConfig(max_trials=3, shrink=0.5)
    x, tau, trace = pcdb(x0, StepSizes([1.0] * 4), 1, 1, HostileModel(x0), cfg, np.random.default_rng(0))
    assert x == x0
    np.testing.assert_allclose(tau.tau, 0.125)
    assert all(not row.accepted and row.trials == 3 for row in trace.rows)
    assert all(row.f_s == 1.0 for row in trace.rows)


def test_pcdb_can_keep_the_last_trial():
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    cfg = BacktrackConfig(max_trials=2, shrink=0.5, on_exhaustion="accept_last")
    x, _, trace = pcdb(x0, StepSizes([1.0] * 4), 1, 1, HostileModel(x0), cfg, np.random.default_rng(0))
    assert x != x0
    assert trace.rows[0].f_s == 2.0


def test_pcdb_raises_on_non_finite_objective():
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    with pytest.raises(NumericalError) as info:
        pcdb(x0, StepSizes([1.0] * 4), 1, 3, NanModel(x0), BacktrackConfig(), np.random.default_rng(0))
    assert isinstance(info.value.trace, IterationTrace)


def test_pcdb_argument_checks():
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    model = QuadraticModel(x0, length=8)
    with pytest.raises(DomainError):
        pcdb(x0, StepSizes([1.0] * 4), 1, 0, model, BacktrackConfig(), np.random.default_rng(0))
    with pytest.raises(DomainError):
        pcdb(x0, StepSizes([1.0] * 4), 9, 1, model, BacktrackConfig(), np.random.default_rng(0))


def test_pcdb_offsets_stay_in_range():
    model = QuadraticModel(constant_maps(0.5, 800.0, 80.0, -20.0), length=16)
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    _, _, trace = pcdb(x0, StepSizes([0.5] * 4), 4, 40, model, BacktrackConfig(), np.random.default_rng(1))
    offsets = {row.offset for row in trace.rows}
    assert offsets <= {1, 2, 3, 4}
    assert len(offsets) > 1


def test_pcdb_records_true_objective():
    model = QuadraticModel(constant_maps(0.5, 800.0, 80.0, -20.0), length=4)
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    _, _, trace = pcdb(x0, StepSizes([0.5] * 4), 2, 7, model, BacktrackConfig(),
                       np.random.default_rng(0), true_objective_every=3)
    evaluated = [row.iteration for row in trace.rows if row.f_true is not None]
    assert evaluated == [3, 6, 7]
    assert trace.final_f_true is not None


# --- C2F ----------------------------------------------------------------------


def test_c2f_cost_and_refinements():
    model = QuadraticModel(constant_maps(0.5, 800.0, 80.0, -20.0), length=16)
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    sched = C2FSchedule((4, 2, 1), (2, 2, 2))
    _, trace = c2f(x0, StepSizes([0.5] * 4), sched, model, BacktrackConfig(), np.random.default_rng(0))
    assert trace.final_cost == Fraction(7, 2)
    assert trace.final_cost == sched.fine_equivalent_budget(16)
    assert trace.refinements == [1, 3, 5]
    assert trace.iterations == 6
    assert [row.stage for row in trace.rows[::4]] == [1, 1, 2, 2, 3, 3]
    costs = [row.cum_cost for row in trace.rows]
    assert all(b >= a for a, b in zip(costs, costs[1:]))


def test_c2f_carries_step_sizes_between_stages():
    model = QuadraticModel(constant_maps(0.5, 800.0, 80.0, -20.0), length=8)
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    _, trace = c2f(x0, StepSizes([0.1] * 4), C2FSchedule((2, 1), (1, 1)), model,
                   BacktrackConfig(), np.random.default_rng(0))
    # every step is accepted at tau <= 1, so tau grows by 1.2 per iteration
    np.testing.assert_allclose(trace.rows[-1].tau, 0.1 * 1.2 ** 2)


def test_trace_csv_layout():
    model = QuadraticModel(constant_maps(0.5, 800.0, 80.0, -20.0), length=4)
    x0 = constant_maps(1.0, 1000.0, 100.0, 0.0)
    _, trace = c2f(x0, StepSizes([0.5] * 4), C2FSchedule((2, 1), (1, 1)), model,
                   BacktrackConfig(), np.random.default_rng(0))
    lines = trace.to_csv().splitlines()
    assert lines[0].split(",") == list(TRACE_COLUMNS)
    assert len(lines) == 1 + 8
    assert lines[1].split(",")[4] == "rho"
    header = trace.header_dict()
    assert header["refinements"] == [1, 2]
    assert header["increments"] == [2, 1]
    assert header["final_cost"] == "3/2"


# --- on a real acquisition ------------------------------------------------------


def test_single_stage_c2f_equals_pcdb(start4, data4):
    tau0 = StepSizes([0.1, 1e6, 1e5, 1e-8])
    cfg = BacktrackConfig()
    x_pcdb, _, trace_pcdb = pcdb(start4, tau0, 2, 3, MultiscaleForwardModel(data4), cfg,
                                 make_rng(5, STREAM_GRID_OFFSETS))
    x_c2f, trace_c2f = c2f(start4, tau0, C2FSchedule((2,), (3,)), MultiscaleForwardModel(data4), cfg,
                           make_rng(5, STREAM_GRID_OFFSETS))
    np.testing.assert_array_equal(x_c2f.values, x_pcdb.values)
    assert trace_c2f.to_csv() == trace_pcdb.to_csv()


def test_pcdb_decreases_the_true_objective(start4, data4):
    model = MultiscaleForwardModel(data4)
    tau0 = StepSizes([0.1, 1e6, 1e5, 1e-8])
    before = model.true_objective(start4)
    x, _, trace = pcdb(start4, tau0, 1, 4, model, BacktrackConfig(), make_rng(1, STREAM_GRID_OFFSETS))
    values = [row.f_s for row in trace.rows]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert model.true_objective(x) < before
    assert trace.final_f_true == pytest.approx(model.true_objective(x))


def test_runs_are_reproducible(start4, data4):
    sched = C2FSchedule((4, 2, 1), (2, 2, 2))
    tau0 = StepSizes([0.1, 1e6, 1e5, 1e-8])
    runs = [c2f(start4, tau0, sched, data4, BacktrackConfig(), make_rng(3, STREAM_GRID_OFFSETS))
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0][0].values, runs[1][0].values)
    assert runs[0][1].to_csv() == runs[1][1].to_csv()


@pytest.mark.slow
def test_pcdb_is_monotone_on_a_phantom():
    phantom = make_phantom(16, seed=1)
    sched = synth_flip_schedule(200, seed=1)
    data = simulate_acquisition(phantom, sched, make_epi_masks(16, 16, 0.125, 200, seed=1))
    x0 = ParameterMaps.constant(16, 16, TissueParams(0.42, 2000.0, 200.0, 0.0))
    tau0 = StepSizes([0.1, 1e6, 1e5, 1e-8])
    _, _, trace = pcdb(x0, tau0, 1, 200, MultiscaleForwardModel(data), BacktrackConfig(),
                       make_rng(1, STREAM_GRID_OFFSETS))
    assert trace.iterations == 200
    values = [row.f_s for row in trace.rows]
    assert all(b <= a for a, b in zip(values, values[1:]))
