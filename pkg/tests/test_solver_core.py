import numpy as np
import pytest

from geometry import ball
from measure_data import DiffuseMeasure
from nonlinearity import LinearDecay, Nonlinearity, Rotation, check_condition, draw_samples
from path_engine import PathConfig
from reference_oracles import default_bumps, duality_residual, fundamental_profile_field, radial_solve
from solver_core import (
    ExcessiveTruncationError,
    GridMismatchError,
    NonConvergenceError,
    Problem,
    SolutionField,
    SolverConfig,
    estimate_barrier,
    martingale_residual,
    pathwise_stampacchia,
    picard_solve,
    stampacchia_check,
    uniqueness_probe,
)

DISK = ball((0.0, 0.0), 1.0)
CFG = PathConfig(step=1e-3, base_seed=21)


def exact_linear(points):
    return 0.5 * (1.0 - np.sum(points**2, axis=1))


def linear_problem():
    return Problem(DISK, (DiffuseMeasure.density("1"),), Nonlinearity(1))


def decay_problem(alpha=1.0):
    f = Nonlinearity(1, LinearDecay(alpha), frozenset({"A4prime", "A4doubleprime", "A5"}))
    return Problem(DISK, (DiffuseMeasure.density("1"),), f)


def rotation_problem():
    f = Nonlinearity(2, Rotation(), frozenset({"A4"}))
    return Problem(DISK, (DiffuseMeasure.density("1"), DiffuseMeasure.zero()), f)


@pytest.fixture(scope="module")
def linear_solution():
    solver = SolverConfig(grid_resolution=9, paths_per_node=400, max_sweeps=6)
    return picard_solve(linear_problem(), CFG, solver)


def test_problem_checks_component_count():
    with pytest.raises(ValueError):
        Problem(DISK, (DiffuseMeasure.zero(), DiffuseMeasure.zero()), Nonlinearity(1))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(damping=0.0)
    with pytest.raises(ValueError):
        SolverConfig(paths_per_node=1)
    assert SolverConfig(truncation_base=8.0).truncation_level(3) == 64.0


def test_field_interpolates_and_vanishes_outside():
    u = SolutionField.from_function(DISK, 33, lambda p: p[:, 0] + 2 * p[:, 1])
    assert u.evaluate(np.array([0.11, -0.23]))[0] == pytest.approx(0.11 - 0.46, abs=1e-12)
    assert np.all(u(np.array([[1.5, 0.0], [0.0, -2.0]])) == 0.0)
    assert np.all(u.node_values[~u.interior_mask] == 0.0)
    assert u.spacing == pytest.approx([1 / 16, 1 / 16])


def test_field_helpers():
    u = SolutionField.from_function(DISK, 9, exact_linear)
    doubled = u.scaled(2.0)
    assert np.allclose(doubled.interior_values, 2 * u.interior_values)
    assert u.sup_distance(doubled) == pytest.approx(np.max(u.interior_values))
    shifted = u.perturbed(lambda p: np.ones(len(p)))
    assert np.allclose(shifted.interior_values, u.interior_values + 1)
    zeros = SolutionField.zeros(DISK, 9, 2)
    assert zeros.n_components == 2 and zeros.resolution == 9


def test_from_nodes_round_trip_and_mismatch():
    u = SolutionField.from_function(DISK, 9, exact_linear)
    back = SolutionField.from_nodes(DISK, 9, u.interior_nodes, u.interior_values, u.interior_standard_errors)
    assert np.array_equal(back.interior_values, u.interior_values)
    with pytest.raises(GridMismatchError):
        SolutionField.from_nodes(DISK, 11, u.interior_nodes, u.interior_values)


def test_linear_solution_matches_exact(linear_solution):
    u, report = linear_solution
    assert report.converged
    assert report.sweeps >= 3
    exact = exact_linear(u.interior_nodes)
    error = np.abs(u.interior_values[:, 0] - exact)
    assert np.all(error <= 4 * u.interior_standard_errors[:, 0] + 0.03)
    assert report.barrier_violations == 0


def test_report_lines(linear_solution):
    _, report = linear_solution
    keys = [line.split(":", 1)[0] for line in report.to_lines()]
    for key in ("sweeps", "sup_change_history", "barrier_violations", "truncated_path_fraction", "se_median"):
        assert key in keys
    assert "stampacchia_l1_lhs" in keys
    assert "stampacchia_a4doubleprime_ok" in keys


def test_same_seed_same_field(linear_solution):
    u, _ = linear_solution
    again, _ = picard_solve(linear_problem(), CFG, SolverConfig(grid_resolution=9, paths_per_node=400, max_sweeps=6))
    assert np.array_equal(u.interior_values, again.interior_values)


def test_barrier_of_lebesgue_density():
    v = estimate_barrier(linear_problem(), CFG, SolverConfig(grid_resolution=9, paths_per_node=400))
    exact = exact_linear(v.interior_nodes)
    assert np.all(np.abs(v.interior_values[:, 0] - exact) <= 4 * v.interior_standard_errors[:, 0] + 0.03)


def test_barrier_rejects_truncated_horizon():
    with pytest.raises(ExcessiveTruncationError):
        estimate_barrier(linear_problem(), PathConfig(step=1e-3, max_steps=50), SolverConfig(grid_resolution=5, paths_per_node=50))


def test_non_convergence_carries_report():
    with pytest.raises(NonConvergenceError) as info:
        picard_solve(linear_problem(), CFG, SolverConfig(grid_resolution=5, paths_per_node=50, max_sweeps=1))
    assert info.value.report.sweeps == 1
    assert not info.value.report.converged


def test_initial_field_must_match_grid():
    with pytest.raises(GridMismatchError):
        picard_solve(
            linear_problem(), CFG, SolverConfig(grid_resolution=5, paths_per_node=50), initial=SolutionField.zeros(DISK, 7)
        )


def test_horizon_is_checked():
    with pytest.raises(ValueError):
        picard_solve(linear_problem(), PathConfig(max_steps=100), SolverConfig(grid_resolution=5, paths_per_node=50))


def test_martingale_residual_detects_perturbation():
    exact = SolutionField.from_function(DISK, 65, exact_linear)
    times = [0.05, 0.1, 0.2]
    stats = martingale_residual(exact, linear_problem(), [0.0, 0.0], 2000, times, CFG)
    assert [s.time for s in stats] == times
    for s in stats:
        assert abs(s.mean[0]) <= 4 * s.standard_error[0] + 0.01
    wrong = exact.perturbed(exact_linear)
    drifted = martingale_residual(wrong, linear_problem(), [0.0, 0.0], 2000, times, CFG)
    assert drifted[-1].worst_ratio > 3
    assert not drifted[-1].passed


def test_stampacchia_bounds_for_linear_decay():
    u = SolutionField.from_function(DISK, 33, exact_linear)
    results = stampacchia_check(u, decay_problem(1.0))
    assert set(results) == {"l1", "a4doubleprime", "a5"}
    assert results["l1"].ok is None
    assert results["a4doubleprime"].ok
    assert results["a5"].rhs == pytest.approx(results["a4doubleprime"].rhs)


def test_stampacchia_without_declared_bound():
    u = SolutionField.from_function(DISK, 17, exact_linear)
    f = Nonlinearity(1, LinearDecay(1.0))
    problem = Problem(DISK, (DiffuseMeasure.density("1"),), Nonlinearity(1, f.kind, frozenset({"A4prime"})))
    assert set(stampacchia_check(u, problem)) == {"l1"}


def test_pathwise_stampacchia():
    u = SolutionField.from_function(DISK, 33, exact_linear)
    (bound,) = pathwise_stampacchia(u, decay_problem(1.0), [0.0, 0.0], CFG, 1000)
    assert bound.ok
    assert bound.lhs < bound.rhs


def test_uniqueness_needs_monotonicity():
    problem = Problem(DISK, (DiffuseMeasure.density("1"),), Nonlinearity(1, LinearDecay(1.0)))
    with pytest.raises(ValueError):
        uniqueness_probe(problem, CFG, SolverConfig(), [])


def test_uniqueness_runs_agree_across_guesses():
    # one interior node: the distances are single differences of independent estimates
    solver = SolverConfig(grid_resolution=3, paths_per_node=400, max_sweeps=40, tol=1e-7)
    problem = decay_problem(1.0)
    base = SolutionField.zeros(DISK, 3)
    bump = SolutionField.from_function(DISK, 3, exact_linear)
    report = uniqueness_probe(problem, CFG, solver, [base, bump.scaled(-1.0), base])
    assert report.distances.shape == (3, 3)
    assert report.pooled_standard_error > 0
    assert report.passed
    # same guess, separate final blocks
    assert report.distances[0, 2] > 0
    assert not np.array_equal(report.fields[0].interior_values, report.fields[2].interior_values)


@pytest.fixture(scope="module")
def rotation_solution():
    solver = SolverConfig(grid_resolution=9, paths_per_node=400, max_sweeps=30)
    return picard_solve(rotation_problem(), CFG, solver)


def test_rotation_system_matches_the_radial_profile(rotation_solution):
    u, report = rotation_solution
    assert report.converged
    assert report.sweeps <= 30
    exact = radial_solve(rotation_problem()).field(u.interior_nodes)
    # the second component is driven by the first alone
    assert exact[:, 1].max() > 0.1
    assert np.all(np.abs(u.interior_values - exact) <= 4 * u.interior_standard_errors + 0.03)


def test_rotation_solution_passes_path_and_weak_checks(rotation_solution):
    u, _ = rotation_solution
    problem = rotation_problem()
    stats = martingale_residual(u, problem, [0.0, 0.0], 2000, [0.05, 0.1, 0.2], CFG, first_index=1 << 40)
    for s in stats:
        assert np.all(np.abs(s.mean) <= 4 * s.standard_error + 0.03)

    # grid interpolation error on the 9 x 9 grid is not part of the budget
    tests = default_bumps(DISK, 3, seed=5)
    residuals = duality_residual(u, problem.prepared(CFG), tests)
    assert len(residuals) == 2 * len(tests)
    assert all(abs(r.residual) <= r.budget + 0.03 for r in residuals)
    doubled = duality_residual(u.scaled(2.0), problem.prepared(CFG), tests)
    assert any(abs(r.residual) > r.budget + 0.03 for r in doubled)


def test_rotation_satisfies_the_angle_but_not_the_sign_condition():
    f = rotation_problem().nonlinearity
    samples = draw_samples(2, DISK, 5000, seed=3)
    angle = check_condition(f, "A4", DISK, samples=samples)
    sign = check_condition(f, "A4doubleprime", DISK, samples=samples)
    assert angle.holds_on_sample
    assert not sign.holds_on_sample
    assert angle.n_samples == sign.n_samples == 5000


def test_fundamental_profile_is_mapped_to_zero():
    # the profile is harmonic off the center and vanishes on the circle, but it is not a
    # solution of the measure-free problem; one application of the path representation gives 0
    problem = Problem(DISK, (DiffuseMeasure.zero(),), Nonlinearity(1))
    initial = fundamental_profile_field(DISK, 9)
    assert initial.interior_values.max() > 1.0
    u, report = picard_solve(problem, CFG, SolverConfig(grid_resolution=9, paths_per_node=50, max_sweeps=5), initial)
    assert report.converged
    assert report.sup_change_history[0] == pytest.approx(np.abs(initial.interior_values).max())
    assert report.sup_change_history[1:] == [0.0] * (report.sweeps - 1)
    assert np.array_equal(u.interior_values, np.zeros_like(u.interior_values))
    assert report.barrier_violations == 0
