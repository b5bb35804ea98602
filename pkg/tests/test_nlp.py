import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import disk, enumerate_qp, grid_min_rosenbrock_disk, random_qp, rosenbrock
from vhempc.nlp import (
    NlpProblem,
    QPInfeasibleError,
    check_gradient,
    solve,
    solve_qp,
    stack_constraints,
    write_iteration_log,
)


def test_qp_scalar_bound():
    # min z^2 s.t. z >= 1 -> z = 1 with multiplier 2
    res = solve_qp(np.array([[2.0]]), np.zeros(1), A=np.array([[-1.0]]), b=np.array([-1.0]))
    assert res.x[0] == pytest.approx(1.0, abs=1e-12)
    assert res.multipliers[0] == pytest.approx(2.0, abs=1e-10)


def test_qp_unconstrained_minimum():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    g = np.array([1.0, 2.0])
    res = solve_qp(H, g)
    np.testing.assert_allclose(res.x, np.linalg.solve(H, -g), atol=1e-12)


def test_qp_box_bounds():
    res = solve_qp(np.eye(2), np.array([-5.0, 5.0]), lb=np.array([-1.0, -1.0]), ub=np.array([1.0, 1.0]))
    np.testing.assert_allclose(res.x, [1.0, -1.0], atol=1e-12)


def test_qp_infeasible_is_reported():
    A = np.array([[1.0], [-1.0]])
    b = np.array([-1.0, -1.0])  # z <= -1 and z >= 1
    with pytest.raises(QPInfeasibleError):
        solve_qp(np.eye(1), np.zeros(1), A=A, b=b)


def test_qp_matches_enumeration_on_random_problems():
    rng = np.random.default_rng(0)
    for _ in range(20):
        H, g, C, d = random_qp(rng)
        _, f_ref = enumerate_qp(H, g, C, d)
        res = solve_qp(H, g, A=C, b=d)
        assert res.objective == pytest.approx(f_ref, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_qp_solution_satisfies_kkt(seed):
    H, g, C, d = random_qp(np.random.default_rng(seed), n=4, rows=6)
    res = solve_qp(H, g, A=C, b=d)
    slack = C @ res.x - d
    lam = res.multipliers
    assert np.all(slack <= 1e-9)
    assert np.all(lam >= -1e-9)
    assert np.max(np.abs(lam * slack)) <= 1e-8
    np.testing.assert_allclose(H @ res.x + g + C.T @ lam, 0.0, atol=1e-8)


def test_rosenbrock_on_disk_matches_grid():
    z_ref, f_ref = grid_min_rosenbrock_disk()
    sol = solve(NlpProblem(2, rosenbrock, disk), np.zeros(2), max_iter=200)
    assert sol.status == "optimal"
    assert abs(sol.objective_value - f_ref) <= 1e-3
    assert np.linalg.norm(sol.z_star - z_ref) <= 1e-3


def test_unconstrained_rosenbrock_reaches_minimum():
    sol = solve(NlpProblem(2, rosenbrock), np.array([-1.2, 1.0]), max_iter=300)
    np.testing.assert_allclose(sol.z_star, [1.0, 1.0], atol=1e-4)


def test_linear_program_like_problem_with_bounds():
    # min x + y on the unit disk shifted: optimum at -(1, 1)/sqrt(2)
    obj = lambda z: (z[0] + z[1], np.ones(2))
    cons = lambda z: (np.array([z @ z - 1.0]), np.atleast_2d(2 * z))
    sol = solve(NlpProblem(2, obj, cons, lower=-2 * np.ones(2), upper=2 * np.ones(2)), np.array([0.5, 0.0]))
    np.testing.assert_allclose(sol.z_star, -np.ones(2) / np.sqrt(2), atol=1e-6)


def test_infeasible_problem_is_flagged():
    obj = lambda z: (float(z @ z), 2 * z)
    cons = stack_constraints([lambda z: (1.0 - z[0], np.array([-1.0])), lambda z: (z[0] + 1.0, np.array([1.0]))])
    sol = solve(NlpProblem(1, obj, cons), np.zeros(1), max_iter=30)
    assert sol.status == "infeasible"
    assert sol.max_violation > 0


def test_gradient_checker_detects_wrong_gradient():
    good = lambda z: (float(np.sin(z[0]) * z[1]), np.array([np.cos(z[0]) * z[1], np.sin(z[0])]))
    bad = lambda z: (float(np.sin(z[0]) * z[1]), np.array([z[1], np.sin(z[0])]))
    z = np.array([0.7, -1.3])
    assert check_gradient(good, z) <= 1e-8
    assert check_gradient(bad, z) > 1e-2


def test_iteration_log_is_written(tmp_path):
    path = tmp_path / "log.csv"
    sol = solve(NlpProblem(2, rosenbrock, disk), np.zeros(2), log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,objective,kkt_residual,violation"
    assert len(lines) == len(sol.log) + 1
    write_iteration_log([], tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text().strip() == "iteration,objective,kkt_residual,violation"
