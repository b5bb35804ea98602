"""Online varying-horizon economic MPC loop.

Each step solves the FHEOC problem at the current horizon, applies either the
first optimal input or the terminal law, and after the next measurement picks
the next horizon among those whose candidate plan fits the contraction budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import fheoc
from .fheoc import (
    CONTRACT_ABSOLUTE,
    CONTRACT_PI,
    CandidatePlan,
    CostSource,
    FheocProblem,
    FheocSolution,
    build_candidate,
    compute_pi_bound,
    plan_violation,
    solve_auxiliary,
    solve_fheoc,
)
from .ingredients import Ingredients, project_horizon
from .model import SystemModel
from .regressor import RegressorModel, Sample, update

logger = logging.getLogger(__name__)


class InfeasibleStartError(RuntimeError):
    """The initial state admits no plan satisfying the start-up constraints."""


# ---------------------------------------------------------------------------
# Horizon schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HorizonSchedule:
    kind: str
    upsilon: Callable[[int], float]
    sigma: Callable[[int], int]

    def values(self, k: int) -> tuple[float, int]:
        u = float(self.upsilon(k))
        s = int(self.sigma(k))
        if not (0.0 <= u <= 1.0) or s < 0:
            raise ValueError(f"schedule {self.kind} out of range at k={k}: ({u}, {s})")
        return u, s


def _zero(k: int) -> float:
    return 0.0


def _one(k: int) -> float:
    return 1.0


def _decaying(k: int) -> float:
    return 0.2 / math.sqrt(max(k, 1))


def _no_growth(k: int) -> int:
    return 0


def _slow_growth(k: int) -> int:
    return max(0, math.ceil(0.01 * (k - 10)))


# module-level callables keep schedules picklable for worker processes
_SCHEDULES = {
    1: (_zero, _no_growth),
    2: (_decaying, _no_growth),
    3: (_one, _no_growth),
    4: (_decaying, _slow_growth),
}


def schedule(pc: int) -> HorizonSchedule:
    """The four horizon-tuning combinations; ``k`` below 1 is evaluated at 1."""
    if pc not in _SCHEDULES:
        raise ValueError(f"unknown horizon schedule PC{pc}")
    upsilon, sigma = _SCHEDULES[pc]
    return HorizonSchedule(f"pc{pc}", upsilon, sigma)


def tentative_horizon(t_first: int, N_k: int, upsilon: float, sigma: int) -> int:
    """Blend of the first terminal hit and the current horizon, plus growth."""
    if t_first > N_k:
        raise ValueError("first hit cannot exceed the horizon")
    # round before ceil so exact integers are not pushed up by float noise
    blend = round(t_first * upsilon + (1.0 - upsilon) * N_k, 9)
    return max(math.ceil(blend) + sigma, 1)


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpcConfig:
    mu: float = 0.95
    N0: int = 7
    schedule: HorizonSchedule = field(default_factory=lambda: schedule(3))
    explicit_terminal: bool = False
    relax_initial_contraction: bool = False
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-8
    max_iter: int = 100
    feas_check_tol: float = 1e-7

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0):
            raise ValueError("compromise factor must lie in [0, 1]")
        if self.N0 < 1:
            raise ValueError("initial horizon must be >= 1")


@dataclass
class StepRecord:
    """What the controller did at one sampling instant."""

    k: int
    N: int
    mode: str
    bound: float
    case: str
    status: str
    V_e: float
    V_a_e: float
    solve_time: float
    u: np.ndarray
    used_candidate: bool = False
    feasible: bool = True
    anomaly: bool = False
    candidate_margin: float = np.nan
    candidate_strict_margin: float = np.nan
    N_next: Optional[int] = None
    N_tilde: Optional[int] = None
    projection_fallback: bool = False
    relaxed_start: bool = False


@dataclass
class ControllerState:
    k: int
    N_k: int
    N_prev: int
    regressor: Optional[RegressorModel] = None
    last_solution: Optional[FheocSolution] = None
    candidate: Optional[CandidatePlan] = None
    pi_bound: Optional[float] = None
    case_flag: str = "case2"
    last_input: Optional[np.ndarray] = None
    last_state: Optional[np.ndarray] = None
    update_count: int = 0
    records: list = field(default_factory=list)


class Controller:
    """Varying-horizon robust EMPC bound to one plant and its ingredients."""

    def __init__(
        self,
        model: SystemModel,
        ingredients: Ingredients,
        config: EmpcConfig,
        cost: Optional[CostSource] = None,
        regressor: Optional[RegressorModel] = None,
        update_offset: int = 0,
    ):
        if cost is None and regressor is None:
            raise ValueError("need a known cost or a regressor")
        self.model = model
        self.ing = ingredients
        self.cfg = config
        self.known_cost = cost
        self.initial_regressor = regressor
        self.update_offset = update_offset  # learning-rate index carried over from earlier episodes
        self.allowed = set(ingredients.horizons.admissible)
        if config.N0 not in self.allowed:
            logger.warning("initial horizon %d is outside the admissible horizon set", config.N0)
        self.fail_solver = False  # fault injection for tests

    # -- helpers -----------------------------------------------------------

    def cost_source(self, state: ControllerState) -> CostSource:
        if state.regressor is not None:
            return fheoc.learned_cost(state.regressor, self.model.n)
        return self.known_cost

    def initial_state(self) -> ControllerState:
        return ControllerState(
            k=0,
            N_k=self.cfg.N0,
            N_prev=self.cfg.N0,
            regressor=self.initial_regressor,
            update_count=self.update_offset,
        )

    def select_case(self, solution: FheocSolution, x_k) -> tuple[str, bool]:
        """``(case, anomaly)``: terminal law only if x_k is in X_T and no prediction hits it."""
        in_terminal = self.ing.Ea(x_k) <= self.ing.sets.a * (1.0 + fheoc.HIT_TOL)
        if solution.hit_indices:
            return "case2", False
        if in_terminal:
            return "case1", False
        logger.debug("no terminal hit predicted from outside the terminal set")
        return "case2", True

    # -- one sampling instant ---------------------------------------------

    def control_step(self, state: ControllerState, x_k) -> tuple[np.ndarray, ControllerState]:
        x_k = np.asarray(x_k, dtype=float)
        model, ing, cfg = self.model, self.ing, self.cfg
        N = state.N_k
        if state.k == 0 or N < state.N_prev or state.pi_bound is None:
            mode, bound = CONTRACT_ABSOLUTE, ing.contraction_budget(N)
        else:
            mode, bound = CONTRACT_PI, state.pi_bound
        cost = self.cost_source(state)
        relaxed = False

        if state.k == 0:
            warm = np.tile(model.u_s, (N, 1))
            if plan_violation(model, ing, x_k, warm, bound, cfg.explicit_terminal) > cfg.tol_feas:
                warm, bound, relaxed = self._restore(x_k, N, bound)
        elif state.candidate is not None and len(state.candidate.u_bar) == N:
            warm = state.candidate.u_bar
        else:
            warm = np.tile(model.u_s, (N, 1))

        problem = FheocProblem(x_k, N, cost, mode, bound, ing, model, cfg.explicit_terminal)
        if self.fail_solver:
            sol = fheoc._make_solution(model, ing, x_k, warm, cost, N, "infeasible", mode, bound, np.inf, 0.0, 0)
        else:
            sol = solve_fheoc(problem, warm, cfg.tol_kkt, cfg.tol_feas, cfg.max_iter)
        used_candidate = False
        if sol.status == "infeasible":
            viol = plan_violation(model, ing, x_k, warm, bound, cfg.explicit_terminal)
            fallback = fheoc._make_solution(
                model, ing, x_k, warm, cost, N, "candidate", mode, bound, viol, sol.solve_time, sol.iterations
            )
            used_candidate = True
            if viol > cfg.feas_check_tol:
                fallback.status = "infeasible"
                if state.k == 0:
                    raise InfeasibleStartError("initial state has no feasible plan")
            sol = fallback
        feasible = sol.status != "infeasible" and sol.max_violation <= cfg.feas_check_tol

        case, anomaly = self.select_case(sol, x_k)
        if case == "case1":
            u = ing.law(x_k)
            if not model.U.contains(u):
                u = model.U.clip(u)
        else:
            u = sol.u_star[0].copy()
        state.records.append(
            StepRecord(
                k=state.k,
                N=N,
                mode=mode,
                bound=bound,
                case=case,
                status=sol.status,
                V_e=sol.V_e,
                V_a_e=sol.V_a_e,
                solve_time=sol.solve_time,
                u=u,
                used_candidate=used_candidate,
                feasible=feasible,
                anomaly=anomaly,
                relaxed_start=relaxed,
            )
        )
        state.last_solution = sol
        state.case_flag = case
        state.last_input = u
        state.last_state = x_k
        return u, state

    def _restore(self, x0, N, bound):
        """Start-up feasibility restoration by minimising the auxiliary cost."""
        model, ing, cfg = self.model, self.ing, self.cfg
        U, value, ok = solve_auxiliary(model, ing, x0, N, tol_feas=cfg.tol_feas)
        if not ok:
            raise InfeasibleStartError("no plan satisfies the state constraints from the initial state")
        if value <= bound:
            return U, bound, False
        if not cfg.relax_initial_contraction:
            raise InfeasibleStartError(
                f"initial auxiliary cost {value:.4g} exceeds the contraction budget {bound:.4g}"
            )
        logger.info("initial contraction budget %.4g relaxed to %.4g", bound, value)
        return U, value * (1.0 + 1e-9) + 1e-12, True

    # -- after the plant moved ---------------------------------------------

    def advance(self, state: ControllerState, x_next, y_prev: Optional[float] = None) -> ControllerState:
        """Learn from the last observation, choose the next horizon and contraction bound."""
        x_next = np.asarray(x_next, dtype=float)
        ing, cfg, model = self.ing, self.cfg, self.model
        sol = state.last_solution
        rec = state.records[-1]
        if state.regressor is not None and y_prev is not None and not state.regressor.frozen:
            state.update_count += 1
            w = np.concatenate([state.last_state, state.last_input])
            state.regressor = update(state.regressor, Sample(w, float(y_prev)), state.update_count)

        N_k = state.N_k
        upsilon, sigma = cfg.schedule.values(state.k)
        fallback = False
        if state.case_flag == "case1":
            t_star = 0
        else:
            t_star = sol.t_first
        if t_star is None:
            # no terminal hit: keep the horizon and shift the plan
            N_tilde = N_k
            N_next = N_k
            cand = self._shifted_candidate(sol, x_next, N_k)
            fallback = True
        else:
            N_tilde = tentative_horizon(t_star, N_k, upsilon, sigma)
            N_next, cand, fallback = self.algorithm1(sol, state.case_flag, x_next, N_tilde, N_k, t_star)

        # decrease check on the candidate that will certify the next step
        if N_next >= N_k:
            La_k = ing.La(state.last_state, state.last_input)
            slack = ing.delta_bar * ing.xi(N_k)
            tol = 1e-6 * (1.0 + abs(sol.V_a_e))
            rec.candidate_margin = sol.V_a_e - cfg.mu * La_k + slack + tol - cand.J_a_value
            rec.candidate_strict_margin = sol.V_a_e - La_k + slack + tol - cand.J_a_value
        state.pi_bound = compute_pi_bound(sol.V_a_e, ing.xi(N_k), cand.J_a_value, cfg.mu, ing.delta_bar)
        rec.N_next = N_next
        rec.N_tilde = N_tilde
        rec.projection_fallback = fallback
        state.candidate = cand
        state.N_prev = N_k
        state.N_k = N_next
        state.k += 1
        return state

    def _shifted_candidate(self, sol: FheocSolution, x_next, N: int) -> CandidatePlan:
        u_bar, x_bar, clipped = fheoc.terminal_law_rollout(self.model, self.ing, x_next, N, sol.u_star[1:])
        J = fheoc.eval_Ja(x_next, u_bar, N, self.ing, self.model)
        return CandidatePlan(u_bar, x_bar, J, None, "shift", clipped)

    def algorithm1(self, sol, case, x_next, N_tilde, N_k, t_star):
        """Scan horizons from the first hit up to ``max(N_tilde, N_k)``.

        Returns ``(N_next, candidate, fallback)``. A horizon is kept when its
        candidate satisfies every constraint and its auxiliary cost fits the
        absolute contraction budget; ``N_tilde`` is projected onto the kept
        horizons that are also admissible.
        """
        ing, model, cfg = self.ing, self.model, self.cfg
        top = min(max(N_tilde, N_k), ing.horizons.N_max)
        plans = {}
        for i in range(max(t_star, 1), top + 1):
            if case == "case1":
                cand = build_candidate(sol, x_next, i, "case1", ing, model)
            else:
                cand = build_candidate(sol, x_next, i, "case2", ing, model, t_first=t_star)
            if cand.J_a_value > i * ing.sets.d + ing.lam * ing.sets.a:
                continue
            if plan_violation(model, ing, x_next, cand.u_bar, None, cfg.explicit_terminal) > cfg.tol_feas:
                continue
            plans[i] = cand
        allowed = [i for i in plans if i in self.allowed]
        N_next = project_horizon(N_tilde, allowed)
        if N_next is None:
            logger.debug("no admissible horizon passed the scan; keeping N=%d", N_k)
            if case == "case1":
                cand = build_candidate(sol, x_next, N_k, "case1", ing, model)
            elif sol.t_first is not None:
                cand = build_candidate(sol, x_next, N_k, "case2", ing, model, t_first=t_star)
            else:
                cand = self._shifted_candidate(sol, x_next, N_k)
            return N_k, cand, True
        return N_next, plans[N_next], False
