import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_discrete_are

from vhempc.ingredients import (
    HorizonSets,
    Ingredients,
    KBounds,
    LipschitzConsts,
    QuadCost,
    RiccatiError,
    TerminalSets,
    compute_gamma_set,
    compute_theta_set,
    decrease_margin,
    eval_Ea,
    eval_La,
    geometric_sum,
    project_horizon,
    riccati_residual,
    sample_ellipsoid,
    solve_dlqr,
    tightened_box,
    tightening_margin,
    xi,
)
from vhempc.model import BoxSet, jacobians

PRINTED_P = np.array([[2.4565, 1.5597], [1.5597, 2.7437]])


# -- LQR -------------------------------------------------------------------


def test_cstr_terminal_matrix_matches_printed_value(cstr, cstr_ing):
    assert np.max(np.abs(cstr_ing.cost.P - PRINTED_P)) <= 1e-2
    A, B = jacobians(cstr.model, cstr.model.x_s, cstr.model.u_s)
    assert riccati_residual(A, B, cstr_ing.cost.Q, cstr_ing.cost.R, cstr_ing.cost.P) <= 1e-8


def test_dlqr_agrees_with_scipy_are():
    rng = np.random.default_rng(2)
    for _ in range(5):
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 2))
        Q, R = np.eye(3), 0.5 * np.eye(2)
        P, K = solve_dlqr(A, B, Q, R)
        np.testing.assert_allclose(P, solve_discrete_are(A, B, Q, R), rtol=1e-7, atol=1e-8)
        assert np.max(np.abs(np.linalg.eigvals(A - B @ K))) < 1.0


def test_dlqr_scalar_by_hand():
    # a = 1, b = 1, q = r = 1: p^2 - p - 1 = 0 -> golden ratio
    P, K = solve_dlqr(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    golden = (1 + np.sqrt(5)) / 2
    assert P[0, 0] == pytest.approx(golden, rel=1e-9)
    assert K[0, 0] == pytest.approx(golden / (1 + golden), rel=1e-9)


def test_dlqr_unstabilisable_raises():
    # unstable mode that B cannot reach
    A = np.diag([2.0, 0.5])
    B = np.array([[0.0], [1.0]])
    with pytest.raises(RiccatiError):
        solve_dlqr(A, B, np.eye(2), np.eye(1), max_iter=500)


def test_auxiliary_costs_by_hand():
    cost = QuadCost(np.diag([1.0, 2.0]), np.eye(1), np.diag([3.0, 4.0]), lam=2.0)
    x_s, u_s = np.array([1.0, 1.0]), np.array([0.5])
    assert eval_La(cost, x_s, u_s, [2.0, 0.0], [1.5]) == pytest.approx(1.0 + 2.0 + 1.0)
    assert eval_Ea(cost, x_s, [2.0, 0.0]) == pytest.approx(7.0)


def test_type_validation():
    with pytest.raises(ValueError):
        QuadCost(np.eye(2), np.eye(1), np.eye(2), lam=0.5)
    with pytest.raises(ValueError):
        QuadCost(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(1), np.eye(2))
    with pytest.raises(ValueError):
        TerminalSets(a_p=0.1, a=0.2, d=0.01)
    with pytest.raises(ValueError):
        KBounds(2.0, 1.0)
    assert KBounds(1.0, 2.0).check_mu(0.95)


# -- terminal sets ---------------------------------------------------------


def test_cstr_terminal_levels_are_ordered(cstr_ing):
    s = cstr_ing.sets
    assert 0 < s.a <= s.a_p
    # d is the smallest stage cost outside X_T: a / lambda_max(P) for Q = I
    assert s.d == pytest.approx(s.a / np.linalg.eigvalsh(cstr_ing.cost.P)[-1], rel=1e-9)
    assert cstr_ing.diagnostics["d_sampled_min_stage_cost"] >= s.d * (1 - 1e-6)


def test_terminal_law_decreases_on_sampled_terminal_set(cstr, cstr_ing):
    pts = sample_ellipsoid(cstr_ing.cost.P, cstr.model.x_s, cstr_ing.sets.a_p, np.random.default_rng(99), 500)
    margins = [decrease_margin(cstr.model, cstr_ing.cost, cstr_ing.law, x) for x in pts]
    assert max(margins) <= 1e-8


def test_terminal_set_is_mapped_into_level_a(cstr, cstr_ing):
    from vhempc.model import step_nominal

    pts = sample_ellipsoid(cstr_ing.cost.P, cstr.model.x_s, cstr_ing.sets.a_p, np.random.default_rng(7), 500)
    for x in pts:
        assert cstr_ing.Ea(step_nominal(cstr.model, x, cstr_ing.law(x))) <= cstr_ing.sets.a * (1 + 1e-6)
        assert cstr.model.U.contains(cstr_ing.law(x), tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 3.0))
def test_ellipsoid_samples_stay_inside(seed, level):
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    pts = sample_ellipsoid(P, np.zeros(2), level, np.random.default_rng(seed), 50)
    values = np.einsum("ij,jk,ik->i", pts, P, pts)
    assert np.all(values <= level * (1 + 1e-12))
    np.testing.assert_allclose(values[:25], level, rtol=1e-10)


# -- tightening and horizon sets --------------------------------------------


def test_tightening_margin_values():
    db = np.sqrt(2) * 1e-4
    assert tightening_margin(0, 1.1854, db) == 0.0
    assert tightening_margin(1, 1.1854, db) == pytest.approx(db, rel=1e-12)
    assert tightening_margin(2, 1.1854, db) == pytest.approx(2.1854 * db, rel=1e-12)
    assert tightening_margin(3, 1.1854, db) == pytest.approx((1 + 1.1854 + 1.1854**2) * db, rel=1e-12)
    assert tightening_margin(4, 1.0, 0.25) == pytest.approx(1.0, rel=1e-12)


def test_tightened_box_matches_margin():
    X = BoxSet([0.0, 0.0], [1.0, 1.0])
    box = tightened_box(X, 3, 1.5, 0.01)
    # 0.01 * (1 + 1.5 + 2.25)
    np.testing.assert_allclose(box.lower, [0.0475, 0.0475], atol=1e-15)
    np.testing.assert_allclose(box.upper, [0.9525, 0.9525], atol=1e-15)


@given(st.floats(0.5, 2.0), st.integers(0, 30), st.floats(0.0, 1e-2))
def test_tightening_is_monotone_in_step(L_f, i, db):
    assert tightening_margin(i + 1, L_f, db) >= tightening_margin(i, L_f, db)


@given(st.integers(1, 40))
def test_geometric_sum_is_continuous_at_one(i):
    assert geometric_sum(1.0 + 1e-7, i) == pytest.approx(geometric_sum(1.0, i), rel=1e-4)
    assert geometric_sum(2.0, i) == 2**i - 1


def test_xi_values():
    consts = LipschitzConsts(c_L=0.5, c_E=1.5)
    assert xi(1, consts, 2.0, 1.2) == pytest.approx(3.0, abs=1e-12)
    # 2 * 1.5 * 1.2^2 + 0.5 * (1 + 1.2)
    assert xi(3, consts, 2.0, 1.2) == pytest.approx(5.42, abs=1e-12)
    assert xi(4, consts, 2.0, 1.0) == pytest.approx(4.5, abs=1e-12)
    with pytest.raises(ValueError):
        xi(0, consts, 2.0, 1.2)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0.1, 5.0),
    st.floats(0.1, 5.0),
    st.floats(1.0, 1.5),
    st.floats(0.0, 0.05),
    st.floats(0.01, 1.0),
    st.floats(0.05, 1.0),
)
def test_gamma_set_is_downward_closed(c_L, c_E, L_f, db, a_p, frac):
    sets = TerminalSets(a_p=a_p, a=a_p * frac, d=0.1)
    X = BoxSet([-3.0, -3.0], [3.0, 3.0])
    out = compute_gamma_set(20, LipschitzConsts(c_L, c_E), sets, L_f, db, np.eye(2), np.zeros(2), X)
    assert out == tuple(range(1, len(out) + 1))


def test_gamma_set_is_everything_without_disturbance():
    sets = TerminalSets(a_p=0.5, a=0.5, d=0.1)
    X = BoxSet([-3.0, -3.0], [3.0, 3.0])
    out = compute_gamma_set(15, LipschitzConsts(1.0, 1.0), sets, 1.3, 0.0, np.eye(2), np.zeros(2), X)
    assert out == tuple(range(1, 16))


def test_theta_set_limit_without_disturbance():
    sets = TerminalSets(a_p=0.5, a=0.4, d=0.1)
    consts = LipschitzConsts(1.0, 1.0)
    bounds = KBounds(1.0, 10.0)
    assert compute_theta_set(12, 0.95, bounds, 0.0, sets, consts, 2.0, 1.2) == tuple(range(1, 13))
    # a vanishing disturbance admits every horizon as well
    assert compute_theta_set(12, 0.95, bounds, 1e-12, sets, consts, 2.0, 1.2) == tuple(range(1, 13))
    # a large one admits none
    assert compute_theta_set(12, 0.95, bounds, 10.0, sets, consts, 2.0, 1.2) == ()
    # no compromise weight: empty unless the disturbance vanishes
    assert compute_theta_set(5, 0.0, bounds, 1e-3, sets, consts, 2.0, 1.2) == ()
    assert compute_theta_set(5, 0.0, bounds, 0.0, sets, consts, 2.0, 1.2) == tuple(range(1, 6))


def test_theta_condition_by_hand():
    # alpha2 * db * xi_N / (mu * gamma0) <= N d + lam a
    sets = TerminalSets(a_p=0.5, a=0.1, d=0.05)
    consts = LipschitzConsts(c_L=1.0, c_E=1.0)
    bounds = KBounds(1.0, 2.0)
    out = compute_theta_set(6, 1.0, bounds, 0.05, sets, consts, 1.0, 1.0)
    # xi_N = 1 + (N - 1) = N, lhs = 0.1 N, rhs = 0.05 N + 0.1 -> N <= 2
    assert out == (1, 2)


def test_projection_tie_breaking():
    assert project_horizon(5, [4, 6]) == 4
    assert project_horizon(5, [6, 4, 5]) == 5
    assert project_horizon(9, [1, 2, 3]) == 3
    assert project_horizon(0, [2, 7]) == 2
    assert project_horizon(3, []) is None


@given(st.integers(-5, 40), st.sets(st.integers(1, 30), min_size=1))
def test_projection_is_nearest_and_smallest_on_ties(target, allowed):
    got = project_horizon(target, allowed)
    best = min(abs(a - target) for a in allowed)
    assert got in allowed and abs(got - target) == best
    assert all(a >= got for a in allowed if abs(a - target) == best)


def test_cstr_admissible_set(cstr_ing):
    adm = cstr_ing.horizons.admissible
    assert 7 in adm
    assert adm == tuple(range(1, len(adm) + 1))


def test_ingredients_round_trip(cstr_ing, tmp_path):
    cstr_ing.save(tmp_path / "ing.json")
    back = Ingredients.load(tmp_path / "ing.json")
    np.testing.assert_array_equal(back.cost.P, cstr_ing.cost.P)
    assert back.sets == cstr_ing.sets
    assert back.horizons.admissible == cstr_ing.horizons.admissible
    assert back.xi(5) == cstr_ing.xi(5)


def test_contraction_budget(cstr_ing):
    s = cstr_ing.sets
    assert cstr_ing.contraction_budget(7) == pytest.approx(7 * s.d + cstr_ing.lam * s.a, rel=1e-15)


def test_horizon_sets_intersection():
    assert HorizonSets(9, (1, 2, 3, 4), (2, 4, 6)).admissible == (2, 4)
