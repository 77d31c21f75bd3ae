"""Tests for the coarse temporal stepping of the Bloch recursion."""

import numpy as np
import pytest

from core.bloch_model import (
    FlipSchedule,
    TissueParams,
    bloch_step,
    simulate_exact,
    simulate_exact_batch,
    synth_flip_schedule,
    transition_matrix,
)
from core.errors import DomainError
from core.multiscale_bloch import (
    OMEGA,
    T1,
    T2,
    TemporalGrid,
    TissueBatch,
    coarse_step,
    coarse_step_derivatives,
    eigen_decompose,
    geometric_sum,
    geometric_sum_derivative,
    interval_plan,
    mean_angle,
    piecewise_constant_schedule,
    power_derivative,
    simulate_multiscale,
    simulate_multiscale_batch,
    simulate_multiscale_with_derivatives,
)

TR = 10.0


def random_batch(rng, size):
    return TissueBatch(
        t1=rng.uniform(300.0, 3000.0, size),
        t2=rng.uniform(30.0, 300.0, size),
        omega=rng.uniform(-50.0, 50.0, size),
    )


# --- grids ---------------------------------------------------------------


def test_grid_indices_and_widths():
    grid = TemporalGrid(4, 2, 16)
    np.testing.assert_array_equal(grid.indices, [2, 6, 10, 14])
    np.testing.assert_array_equal(grid.widths, [2, 4, 4, 4])
    assert grid.size == 4


def test_grid_size_uses_floor():
    grid = TemporalGrid(16, 16, 1000)
    assert grid.size == 62
    assert grid.indices[-1] == 16 + 16 * 61


def test_fine_grid_covers_every_frame():
    grid = TemporalGrid.fine(7)
    np.testing.assert_array_equal(grid.indices, np.arange(1, 8))


@pytest.mark.parametrize("increment, offset, length", [(0, 1, 10), (4, 0, 10), (4, 5, 10), (12, 1, 10)])
def test_grid_validation(increment, offset, length):
    with pytest.raises(DomainError):
        TemporalGrid(increment, offset, length)


def test_mean_angle_and_plan():
    sched = FlipSchedule(angles=np.arange(1, 9, dtype=float) / 10.0)
    assert mean_angle(sched, 0, 2) == pytest.approx(0.15)
    plan = interval_plan(sched, TemporalGrid(3, 2, 8))
    assert [w for w, _ in plan] == [2, 3]
    assert plan[1][1] == pytest.approx(0.4)


@pytest.mark.parametrize("start, stop", [(3, 3), (4, 2), (0, 9)])
def test_mean_angle_rejects_bad_interval(start, stop):
    sched = FlipSchedule(angles=np.full(8, 0.2))
    with pytest.raises(DomainError):
        mean_angle(sched, start, stop)


def test_plan_rejects_mismatched_grid():
    with pytest.raises(DomainError):
        interval_plan(FlipSchedule(angles=np.full(8, 0.2)), TemporalGrid(2, 1, 10))


# --- geometric sums --------------------------------------------------------


def test_geometric_sum_values():
    assert geometric_sum(0.5, 4) == pytest.approx(1.875)
    assert geometric_sum(1.0, 5) == pytest.approx(5.0)
    assert geometric_sum(0.0, 3) == pytest.approx(1.0)
    assert geometric_sum(0.3 + 0.4j, 1) == pytest.approx(1.0)


def test_geometric_sum_derivative_values():
    assert geometric_sum_derivative(0.5, 4) == pytest.approx(2.75)
    assert geometric_sum_derivative(1.0, 6) == pytest.approx(15.0)


def test_geometric_sum_is_continuous_at_one():
    n = 25
    for lam in (1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 1e-9j):
        direct = sum(lam ** k for k in range(n))
        assert geometric_sum(lam, n) == pytest.approx(direct, rel=1e-12)
    for lam in (1.0 + 1e-7, 1.0 - 1e-7j):
        direct = sum(k * lam ** (k - 1) for k in range(1, n))
        assert geometric_sum_derivative(lam, n) == pytest.approx(direct, rel=1e-9)


def test_geometric_sum_derivative_matches_finite_difference():
    lam, n, h = 0.7 + 0.2j, 9, 1e-6
    fd = (geometric_sum(lam + h, n) - geometric_sum(lam - h, n)) / (2 * h)
    assert geometric_sum_derivative(lam, n) == pytest.approx(fd, rel=1e-7)


def test_geometric_sum_rejects_empty_sum():
    with pytest.raises(DomainError):
        geometric_sum(0.5, 0)


# --- eigen-decomposition ---------------------------------------------------


@pytest.mark.parametrize("k", [0, 1, 2, 5, 17])
def test_spectral_powers_match_matrix_power(k):
    rng = np.random.default_rng(42)
    for angle in rng.uniform(0.05, 1.4, 20):
        op = eigen_decompose(angle, random_batch(rng, 5), TR)
        assert not op.defective.any()
        spectral = np.einsum("pi,pirc->prc", op.eigenvalues ** k, op.projectors)
        reference = np.linalg.matrix_power(op.transition, k)
        np.testing.assert_allclose(spectral.real, reference, atol=1e-9)
        assert np.max(np.abs(spectral.imag)) < 1e-9


def test_projectors_form_a_resolution_of_identity():
    rng = np.random.default_rng(3)
    op = eigen_decompose(0.6, random_batch(rng, 8), TR)
    total = op.projectors.sum(axis=1)
    np.testing.assert_allclose(total, np.broadcast_to(np.eye(3), total.shape), atol=1e-10)
    for i in range(3):
        U = op.projectors[:, i]
        np.testing.assert_allclose(U @ U, U, atol=1e-9)


def test_real_eigenvalue_is_transverse_decay():
    u = TissueParams(rho=1.0, t1=1000.0, t2=100.0, omega=5.0)
    op = eigen_decompose(0.4, u, TR)
    assert op.eigenvalues[0, 2] == pytest.approx(np.exp(-0.1))
    assert op.eigenvalues[0, 0] == pytest.approx(np.conj(op.eigenvalues[0, 1]))


def test_zero_angle_is_defective():
    u = TissueParams(rho=1.0, t1=1000.0, t2=100.0)
    op = eigen_decompose(0.0, u, TR)
    assert op.defective[0]
    np.testing.assert_allclose(sorted(op.eigenvalues[0].real),
                               sorted([np.exp(-0.1), np.exp(-0.1), np.exp(-0.01)]))


def test_coarse_step_matches_repeated_steps():
    rng = np.random.default_rng(8)
    batch = random_batch(rng, 6)
    op = eigen_decompose(0.5, batch, TR, step_count=7)
    m = np.tile([0.1, -0.2, 0.5], (6, 1))
    expected = m.copy()
    for _ in range(7):
        expected = np.einsum("prc,pc->pr", op.transition, expected) + op.b
    np.testing.assert_allclose(coarse_step(op, m), expected, atol=1e-12)


def test_coarse_step_of_defective_voxels_uses_matrix_power():
    batch = TissueBatch(t1=np.array([1000.0, 800.0]), t2=np.array([100.0, 80.0]), omega=np.zeros(2))
    op = eigen_decompose(0.0, batch, TR, step_count=5)
    m = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.3]])
    e2 = np.exp(-TR / batch.t1)
    expected_z = 1.0 + (m[:, 2] - 1.0) * e2 ** 5
    np.testing.assert_allclose(coarse_step(op, m)[:, 2], expected_z, rtol=1e-12)


def test_zero_angle_intervals_between_regular_ones():
    batch = TissueBatch(t1=np.array([500.0, 1200.0]), t2=np.array([500.0, 120.0]), omega=np.array([0.0, 10.0]))
    angles = np.repeat([0.0, 0.5, 0.0, 0.9], 4)
    sched = FlipSchedule(angles=angles, tr=TR)
    states, _ = simulate_multiscale_batch(batch, sched, TemporalGrid(4, 4, 16))
    exact = simulate_exact_batch(batch.t1, batch.t2, batch.omega, sched)
    np.testing.assert_allclose(states, exact[:, [3, 7, 11, 15]], atol=1e-9)


def test_power_derivative_matches_finite_difference():
    u = TissueParams(rho=1.0, t1=900.0, t2=90.0, omega=7.0)
    op = eigen_decompose(0.7, u, TR)
    derivs = coarse_step_derivatives(op)
    steps = {T1: 1e-3, T2: 1e-4, OMEGA: 1e-5}
    for chi, h in steps.items():
        batch = TissueBatch.coerce(u)
        value = batch.parameter(chi)
        plus = eigen_decompose(0.7, batch.replace(chi, value + h), TR).transition
        minus = eigen_decompose(0.7, batch.replace(chi, value - h), TR).transition
        k = 6
        fd = (np.linalg.matrix_power(plus, k) - np.linalg.matrix_power(minus, k)) / (2 * h)
        analytic = power_derivative(op, derivs, chi, k)
        np.testing.assert_allclose(analytic.real, fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


def test_single_step_operator_is_one_bloch_step():
    rng = np.random.default_rng(13)
    batch = random_batch(rng, 7)
    op = eigen_decompose(0.8, batch, TR, step_count=1)
    A, b = transition_matrix(0.8, batch.omega, batch.t1, batch.t2, TR)
    m = rng.uniform(-0.5, 0.5, (7, 3))
    np.testing.assert_allclose(coarse_step(op, m), bloch_step(m, A, b), atol=1e-12)


def test_eigenvalues_do_not_move_with_off_resonance():
    rng = np.random.default_rng(14)
    op = eigen_decompose(0.9, random_batch(rng, 6), TR)
    derivs = coarse_step_derivatives(op)
    np.testing.assert_allclose(derivs.dlambda[:, OMEGA], 0.0, atol=1e-12)
    # sum_i U_i = I for every parameter value
    np.testing.assert_allclose(derivs.dU.sum(axis=2), 0.0, atol=1e-9)


# --- multiscale simulation -----------------------------------------------


def test_fine_grid_reproduces_exact_simulator():
    rng = np.random.default_rng(5)
    batch = random_batch(rng, 20)
    sched = synth_flip_schedule(200, seed=1)
    states, _ = simulate_multiscale_batch(batch, sched, TemporalGrid.fine(200))
    exact = simulate_exact_batch(batch.t1, batch.t2, batch.omega, sched)
    np.testing.assert_allclose(states, exact, atol=1e-12)


@pytest.mark.parametrize("increment, offset", [(2, 1), (4, 3), (5, 5), (8, 2)])
def test_constant_schedule_is_exact_on_the_grid(increment, offset):
    rng = np.random.default_rng(increment)
    batch = random_batch(rng, 10)
    sched = FlipSchedule(angles=np.full(80, np.radians(30.0)), tr=TR)
    grid = TemporalGrid(increment, offset, 80)
    states, _ = simulate_multiscale_batch(batch, sched, grid)
    exact = simulate_exact_batch(batch.t1, batch.t2, batch.omega, sched)
    np.testing.assert_allclose(states, exact[:, grid.frame_slots], atol=1e-9)


def test_multiscale_equals_exact_on_piecewise_constant_schedule():
    u = TissueParams(rho=1.0, t1=1331.0, t2=110.0, omega=-8.0)
    sched = synth_flip_schedule(120, seed=7)
    grid = TemporalGrid(6, 4, 120)
    coarse = simulate_multiscale(u, sched, grid)
    exact = simulate_exact(u, piecewise_constant_schedule(sched, grid))
    np.testing.assert_allclose(coarse, exact[grid.frame_slots], atol=1e-9)


def relative_error(u, sched, grid):
    coarse = simulate_multiscale(u, sched, grid)
    exact = simulate_exact(u, sched)[grid.frame_slots]
    return np.linalg.norm(coarse - exact) / np.linalg.norm(exact)


def test_error_shrinks_with_the_increment():
    # the 25-frame averaging of the 1000-frame lobe profile costs about 31%
    u = TissueParams(rho=1.0, t1=811.0, t2=77.0, omega=0.0)
    sched = synth_flip_schedule(1000, seed=0)
    errors = [relative_error(u, sched, TemporalGrid(n, n, 1000)) for n in (25, 10, 5, 1)]
    assert errors == sorted(errors, reverse=True)
    assert errors[0] < 0.4
    assert errors[1] < 0.1
    assert errors[2] < 0.02
    assert errors[3] < 1e-12



def test_single_voxel_output_shapes():
    u = TissueParams(rho=1.0, t1=800.0, t2=80.0)
    sched = synth_flip_schedule(40, seed=1)
    states, jac = simulate_multiscale_with_derivatives(u, sched, TemporalGrid(4, 1, 40))
    assert states.shape == (10, 3)
    assert jac.shape == (10, 3, 3)


def _finite_difference_jacobian(batch, sched, grid):
    columns = []
    for chi in (T1, T2, OMEGA):
        value = batch.parameter(chi)
        h = 1e-4 * value if chi != OMEGA else np.full_like(value, 1e-3)
        plus, _ = simulate_multiscale_batch(batch.replace(chi, value + h), sched, grid)
        minus, _ = simulate_multiscale_batch(batch.replace(chi, value - h), sched, grid)
        columns.append((plus - minus) / (2 * h)[:, None, None])
    return np.stack(columns, axis=-1)


@pytest.mark.parametrize("increment, offset", [(1, 1), (4, 2), (8, 8)])
def test_derivatives_match_finite_differences(increment, offset):
    rng = np.random.default_rng(21)
    batch = random_batch(rng, 6)
    sched = synth_flip_schedule(32, seed=2)
    grid = TemporalGrid(increment, offset, 32)
    _, jac = simulate_multiscale_batch(batch, sched, grid, with_derivatives=True)
    fd = _finite_difference_jacobian(batch, sched, grid)
    for chi in (T1, T2, OMEGA):
        scale = np.abs(fd[..., chi]).max()
        np.testing.assert_allclose(jac[..., chi], fd[..., chi], rtol=1e-5, atol=1e-6 * scale)


def test_derivatives_with_zero_flip_angles():
    batch = TissueBatch(t1=np.array([900.0]), t2=np.array([90.0]), omega=np.array([3.0]))
    sched = FlipSchedule(angles=np.zeros(24), tr=TR)
    grid = TemporalGrid(4, 4, 24)
    _, jac = simulate_multiscale_batch(batch, sched, grid, with_derivatives=True)
    fd = _finite_difference_jacobian(batch, sched, grid)
    np.testing.assert_allclose(jac, fd, rtol=1e-4, atol=1e-9)


def test_derivatives_with_coalescing_eigenvalues():
    # t1 = t2 and alpha = 0 give a repeated eigenvalue of the interval map
    batch = TissueBatch(t1=np.array([500.0, 700.0]), t2=np.array([500.0, 70.0]), omega=np.array([0.0, 5.0]))
    sched = FlipSchedule(angles=np.repeat([0.0, 0.4, 0.0], 8), tr=TR)
    grid = TemporalGrid(4, 4, 24)
    states, jac = simulate_multiscale_batch(batch, sched, grid, with_derivatives=True)
    exact = simulate_exact_batch(batch.t1, batch.t2, batch.omega, piecewise_constant_schedule(sched, grid))
    np.testing.assert_allclose(states, exact[:, grid.frame_slots], atol=1e-12)
    fd = _finite_difference_jacobian(batch, sched, grid)
    for chi in (T1, T2, OMEGA):
        scale = np.abs(fd[..., chi]).max()
        np.testing.assert_allclose(jac[..., chi], fd[..., chi], rtol=1e-4, atol=1e-6 * max(scale, 1e-9))



def test_derivative_columns_can_be_restricted():
    rng = np.random.default_rng(2)
    batch = random_batch(rng, 3)
    sched = synth_flip_schedule(24, seed=3)
    grid = TemporalGrid(3, 1, 24)
    _, full = simulate_multiscale_batch(batch, sched, grid, with_derivatives=True)
    _, partial = simulate_multiscale_batch(batch, sched, grid, with_derivatives=True, wrt=(T2,))
    np.testing.assert_allclose(partial[..., T2], full[..., T2], rtol=1e-12, atol=1e-15)
    assert not partial[..., T1].any()
    assert not partial[..., OMEGA].any()


def test_off_resonance_has_no_effect_without_pulses():
    # with alpha = 0 the state never leaves the z-axis
    u = TissueParams(rho=1.0, t1=700.0, t2=70.0, omega=20.0)
    sched = FlipSchedule(angles=np.zeros(10), tr=TR)
    _, jac = simulate_multiscale_with_derivatives(u, sched, TemporalGrid.fine(10))
    np.testing.assert_allclose(jac[..., OMEGA], 0.0, atol=1e-15)
