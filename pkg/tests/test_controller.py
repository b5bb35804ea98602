import numpy as np
import pytest
from hypothesis import given, strategies as st

from vhempc.controller import Controller, EmpcConfig, InfeasibleStartError, schedule, tentative_horizon
from vhempc.fheoc import CONTRACT_ABSOLUTE, CONTRACT_PI, CostSource, known_cost
from vhempc.harness import default_basis
from vhempc.model import step_nominal
from vhempc.regressor import new_regressor


def test_tentative_horizon_arithmetic():
    assert tentative_horizon(3, 7, 0.5, 0) == 5
    assert tentative_horizon(3, 7, 1.0, 0) == 3
    assert tentative_horizon(3, 7, 0.0, 0) == 7
    assert tentative_horizon(3, 7, 0.0, 2) == 9
    assert tentative_horizon(4, 7, 0.5, 0) == 6  # ceil(5.5)
    assert tentative_horizon(0, 7, 1.0, 0) == 1
    # 0.2 * 5 + 0.8 * 10 is 9.000000000000002 in floating point
    assert tentative_horizon(5, 10, 0.2, 0) == 9
    with pytest.raises(ValueError):
        tentative_horizon(8, 7, 0.5, 0)


@given(st.integers(1, 40), st.data())
def test_tentative_horizon_range(N, data):
    t = data.draw(st.integers(0, N))
    ups = data.draw(st.floats(0.0, 1.0))
    sig = data.draw(st.integers(0, 5))
    out = tentative_horizon(t, N, ups, sig)
    assert max(t, 1) <= out <= N + sig
    assert tentative_horizon(t, N, 0.0, 0) == N


def test_schedules():
    assert schedule(1).values(50) == (0.0, 0)
    assert schedule(3).values(0) == (1.0, 0)
    assert schedule(2).values(0) == schedule(2).values(1) == (0.2, 0)
    assert schedule(2).values(4) == (0.1, 0)
    pc4 = schedule(4)
    assert pc4.values(10)[1] == 0
    assert pc4.values(11)[1] == 1
    assert pc4.values(110)[1] == 1
    assert pc4.values(111)[1] == 2
    with pytest.raises(ValueError):
        schedule(5)


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3, 4]))
def test_schedule_values_in_range(k, pc):
    u, s = schedule(pc).values(k)
    assert 0.0 <= u <= 1.0 and s >= 0


def test_config_validation():
    with pytest.raises(ValueError):
        EmpcConfig(mu=1.5)
    with pytest.raises(ValueError):
        EmpcConfig(N0=0)


def _run(ctrl, x, steps, model, disturbance=None):
    state = ctrl.initial_state()
    xs, us = [x], []
    for _ in range(steps):
        u, state = ctrl.control_step(state, x)
        x = step_nominal(model, x, u) if disturbance is None else step_nominal(model, x, u) + disturbance
        state = ctrl.advance(state, x)
        xs.append(x)
        us.append(u)
    return state, np.array(xs), np.array(us)


def test_tracking_cost_keeps_the_steady_state(cstr, cstr_ing):
    ing = cstr_ing
    tracking = CostSource("tracking", lambda x, u: (ing.La(x, u), 2 * (x - ing.x_s), 0.2 * (u - ing.u_s)))
    ctrl = Controller(cstr.model, ing, EmpcConfig(N0=7, schedule=schedule(1)), cost=tracking)
    _, xs, us = _run(ctrl, cstr.model.x_s.copy(), 6, cstr.model)
    np.testing.assert_allclose(xs, np.tile(cstr.model.x_s, (7, 1)), atol=1e-9)
    np.testing.assert_allclose(us, np.tile(cstr.model.u_s, (6, 1)), atol=1e-7)


def test_modes_follow_the_horizon(cstr, cstr_ing):
    ctrl = Controller(cstr.model, cstr_ing, EmpcConfig(N0=7, schedule=schedule(3)), cost=known_cost(cstr))
    state, _, _ = _run(ctrl, cstr.x0, 12, cstr.model)
    recs = state.records
    assert recs[0].mode == CONTRACT_ABSOLUTE
    for prev, cur in zip(recs, recs[1:]):
        expected = CONTRACT_PI if cur.N >= prev.N else CONTRACT_ABSOLUTE
        assert cur.mode == expected
        assert cur.N in cstr_ing.horizons.admissible
    # full contraction shortens the horizon somewhere along the way
    assert min(r.N for r in recs) < 7


def test_pi_bound_is_respected(cstr, cstr_ing):
    ctrl = Controller(cstr.model, cstr_ing, EmpcConfig(N0=7, schedule=schedule(1)), cost=known_cost(cstr))
    state, _, _ = _run(ctrl, cstr.x0, 10, cstr.model)
    for r in state.records:
        assert r.feasible
        assert r.V_a_e <= r.bound + 1e-7


def test_solver_failure_falls_back_to_candidate(cstr, cstr_ing):
    ctrl = Controller(cstr.model, cstr_ing, EmpcConfig(N0=7, schedule=schedule(1)), cost=known_cost(cstr))
    state = ctrl.initial_state()
    x = cstr.x0
    for _ in range(3):
        u, state = ctrl.control_step(state, x)
        x = step_nominal(cstr.model, x, u)
        state = ctrl.advance(state, x)
    planned = state.candidate.u_bar[0].copy()
    ctrl.fail_solver = True
    u, state = ctrl.control_step(state, x)
    rec = state.records[-1]
    assert rec.used_candidate and rec.feasible
    if rec.case == "case2":
        np.testing.assert_array_equal(u, planned)


def test_over_budget_start_needs_relaxation(cstr, cstr_ing):
    x0 = np.array([0.02, 0.02])
    strict = Controller(cstr.model, cstr_ing, EmpcConfig(N0=7), cost=known_cost(cstr))
    with pytest.raises(InfeasibleStartError):
        strict.control_step(strict.initial_state(), x0)
    relaxed = Controller(cstr.model, cstr_ing, EmpcConfig(N0=7, relax_initial_contraction=True), cost=known_cost(cstr))
    _, state = relaxed.control_step(relaxed.initial_state(), x0)
    assert state.records[-1].relaxed_start


def test_frozen_regressor_is_not_updated(cstr, cstr_ing):
    reg = new_regressor(default_basis(cstr), 1, gamma0=1e-3).freeze()
    ctrl = Controller(cstr.model, cstr_ing, EmpcConfig(N0=7, schedule=schedule(1)), regressor=reg)
    state = ctrl.initial_state()
    u, state = ctrl.control_step(state, cstr.x0)
    state = ctrl.advance(state, step_nominal(cstr.model, cstr.x0, u), y_prev=-0.9)
    np.testing.assert_array_equal(state.regressor.theta, reg.theta)


def test_live_regressor_is_updated(cstr, cstr_ing):
    reg = new_regressor(default_basis(cstr), 1, gamma0=1e-4)
    ctrl = Controller(cstr.model, cstr_ing, EmpcConfig(N0=7, schedule=schedule(1)), regressor=reg)
    state = ctrl.initial_state()
    u, state = ctrl.control_step(state, cstr.x0)
    state = ctrl.advance(state, step_nominal(cstr.model, cstr.x0, u), y_prev=-0.9)
    assert state.update_count == 1
    assert not np.array_equal(state.regressor.theta, reg.theta)


def test_controller_needs_a_cost(cstr, cstr_ing):
    with pytest.raises(ValueError):
        Controller(cstr.model, cstr_ing, EmpcConfig())
