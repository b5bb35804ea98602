"""Finite-horizon economic optimal control problem and its candidate plans.

Decision variables are the stacked inputs; states come from a nominal rollout
whose forward sensitivities give exact gradients of every cost and row.
State constraints are tightened along the prediction so that the realised
next state stays feasible under the disturbance bound.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nlp
from .ingredients import Ingredients, tightened_box
from .model import BoxSet, Scenario, SystemModel, jacobians, step_nominal
from .regressor import RegressorModel, predict_with_gradient

logger = logging.getLogger(__name__)

CONTRACT_ABSOLUTE = "contract_absolute"
CONTRACT_PI = "contract_pi"
MODES = (CONTRACT_ABSOLUTE, CONTRACT_PI)
HIT_TOL = 1e-8


# ---------------------------------------------------------------------------
# Stage costs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostSource:
    """Economic stage cost ``(x, u) -> (value, d/dx, d/du)``."""

    kind: str
    stage: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]


def known_cost(scenario: Scenario) -> CostSource:
    truth = scenario.economic_cost_truth
    grad = scenario.economic_cost_gradient

    def stage(x, u):
        value = truth(x, u, 0.0)
        if grad is not None:
            gx, gu = grad(x, u)
            return value, np.asarray(gx, float), np.asarray(gu, float)
        gx = np.array([_central(lambda v: truth(v, u, 0.0), x, j) for j in range(x.size)])
        gu = np.array([_central(lambda v: truth(x, v, 0.0), u, j) for j in range(u.size)])
        return value, gx, gu

    return CostSource("known", stage)


def _central(fun, z, j, h=1e-6):
    e = np.zeros(z.size)
    e[j] = h * (1.0 + abs(z[j]))
    return (fun(z + e) - fun(z - e)) / (2 * e[j])


def learned_cost(regressor: RegressorModel, n: int) -> CostSource:
    def stage(x, u):
        value, grad = predict_with_gradient(regressor, np.concatenate([x, u]))
        return value, grad[:n], grad[n:]

    return CostSource("learned", stage)


# ---------------------------------------------------------------------------
# Rollouts and costs
# ---------------------------------------------------------------------------


def rollout(model: SystemModel, x0, u_seq) -> np.ndarray:
    x = np.asarray(x0, dtype=float)
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    states = [x]
    for u in u_seq:
        x = step_nominal(model, x, u)
        states.append(x)
    return np.array(states)


def rollout_with_sensitivities(model: SystemModel, x0, u_seq):
    """States ``(N+1, n)`` and sensitivities ``dx_i/dz`` of shape ``(N+1, n, N*m)``."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    N, m = u_seq.shape
    n = model.n
    X = np.empty((N + 1, n))
    S = np.zeros((N + 1, n, N * m))
    X[0] = x0
    for i in range(N):
        A, B = jacobians(model, X[i], u_seq[i])
        X[i + 1] = step_nominal(model, X[i], u_seq[i])
        S[i + 1] = A @ S[i]
        S[i + 1][:, i * m : (i + 1) * m] += B
    return X, S


def eval_Ja(x0, u_seq, N: int, ingredients: Ingredients, model: SystemModel) -> float:
    """Auxiliary cost of the nominal rollout: stage sum plus weighted terminal term."""
    if N < 1:
        raise ValueError("horizon must be >= 1")
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[0] != N:
        raise ValueError("input sequence length must equal N")
    X = rollout(model, x0, u_seq)
    total = sum(ingredients.La(X[i], u_seq[i]) for i in range(N))
    return float(total + ingredients.lam * ingredients.Ea(X[N]))


def eval_Je(x0, u_seq, N: int, cost: CostSource, model: SystemModel) -> float:
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[0] != N:
        raise ValueError("input sequence length must equal N")
    X = rollout(model, x0, u_seq)
    return float(sum(cost.stage(X[i], u_seq[i])[0] for i in range(N)))


def state_boxes(model: SystemModel, ingredients: Ingredients, N: int) -> list:
    """Constraint box for predicted state ``i`` (index 0 unused)."""
    return [tightened_box(model.X, i, ingredients.L_f, ingredients.delta_bar) for i in range(N + 1)]


# ---------------------------------------------------------------------------
# Problem and solution types
# ---------------------------------------------------------------------------


@dataclass
class FheocProblem:
    x_k: np.ndarray
    N: int
    cost: CostSource
    mode: str
    bound: float
    ingredients: Ingredients
    model: SystemModel
    explicit_terminal: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown constraint mode {self.mode!r}")
        if not np.isfinite(self.bound):
            raise ValueError("contraction bound must be finite")


@dataclass
class FheocSolution:
    u_star: np.ndarray
    x_star: np.ndarray
    V_e: float
    V_a_e: float
    hit_indices: tuple
    t_first: Optional[int]
    status: str
    N: int
    mode: str = CONTRACT_ABSOLUTE
    bound: float = np.nan
    max_violation: float = 0.0
    solve_time: float = 0.0
    iterations: int = 0

    @property
    def feasible(self) -> bool:
        return self.status in ("optimal", "max_iter", "fallback_feasible", "candidate")


@dataclass
class CandidatePlan:
    u_bar: np.ndarray
    x_bar: np.ndarray
    J_a_value: float
    t_last: Optional[int]
    case: str
    clipped: bool = False


def hits(ingredients: Ingredients, x_seq) -> tuple:
    """Prediction indices ``i >= 1`` whose state lies in the terminal set."""
    a = ingredients.sets.a * (1.0 + HIT_TOL)
    return tuple(i for i in range(1, len(x_seq)) if ingredients.Ea(x_seq[i]) <= a)


def first_hit(solution: FheocSolution, a: Optional[float] = None) -> Optional[int]:
    return solution.hit_indices[0] if solution.hit_indices else None


def last_hit(solution: FheocSolution, N_next: int, t_first: int) -> int:
    """Latest terminal-set hit between ``t_first`` and ``min(N_k, N_next)``."""
    upper = min(solution.N, N_next)
    inside = [i for i in solution.hit_indices if t_first <= i <= upper]
    if not inside:
        raise ValueError("no terminal hit inside the splice window")
    return max(inside)


def plan_violation(
    model: SystemModel,
    ingredients: Ingredients,
    x0,
    u_seq,
    bound: Optional[float],
    explicit_terminal: bool = False,
    boxes: Optional[list] = None,
) -> float:
    """Largest violation of input bounds, tightened state bounds and cost rows."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    N = u_seq.shape[0]
    X = rollout(model, x0, u_seq)
    boxes = boxes or state_boxes(model, ingredients, N)
    viol = max(model.U.violation(u) for u in u_seq)
    viol = max(viol, max(boxes[i].violation(X[i]) for i in range(1, N + 1)))
    if bound is not None:
        Ja = sum(ingredients.La(X[i], u_seq[i]) for i in range(N)) + ingredients.lam * ingredients.Ea(X[N])
        viol = max(viol, Ja - bound)
    if explicit_terminal:
        viol = max(viol, ingredients.Ea(X[N]) - ingredients.sets.a)
    return float(viol)


# ---------------------------------------------------------------------------
# NLP assembly
# ---------------------------------------------------------------------------


class _Evaluator:
    """Caches one rollout per decision vector for objective and rows."""

    def __init__(self, model, ingredients, x0, N, cost, bound, explicit_terminal, with_objective=True):
        self.model = model
        self.ing = ingredients
        self.x0 = np.asarray(x0, dtype=float)
        self.N = N
        self.m = model.m
        self.cost = cost
        self.bound = bound
        self.explicit_terminal = explicit_terminal
        self.boxes = state_boxes(model, ingredients, N)
        self.lo = np.array([b.lower for b in self.boxes[1:]])
        self.hi = np.array([b.upper for b in self.boxes[1:]])
        self._key = None

    def _eval(self, z):
        key = z.tobytes()
        if key == self._key:
            return
        self._key = key
        U = z.reshape(self.N, self.m)
        X, S = rollout_with_sensitivities(self.model, self.x0, U)
        self.X, self.S, self.U = X, S, U

    def objective(self, z):
        self._eval(z)
        X, S, U, m = self.X, self.S, self.U, self.m
        value = 0.0
        grad = np.zeros(z.size)
        for i in range(self.N):
            v, gx, gu = self.cost.stage(X[i], U[i])
            value += v
            grad += gx @ S[i]
            grad[i * m : (i + 1) * m] += gu
        return value, grad

    def auxiliary(self, z):
        self._eval(z)
        X, S, U, m, ing = self.X, self.S, self.U, self.m, self.ing
        Q, R, P, lam = ing.cost.Q, ing.cost.R, ing.cost.P, ing.cost.lam
        value = 0.0
        grad = np.zeros(z.size)
        for i in range(self.N):
            dx = X[i] - ing.x_s
            du = U[i] - ing.u_s
            value += dx @ Q @ dx + du @ R @ du
            grad += 2.0 * (Q @ dx) @ S[i]
            grad[i * m : (i + 1) * m] += 2.0 * (R @ du)
        dxN = X[self.N] - ing.x_s
        value += lam * dxN @ P @ dxN
        grad += 2.0 * lam * (P @ dxN) @ S[self.N]
        return float(value), grad

    def rows(self, z):
        self._eval(z)
        X, S = self.X, self.S
        states = X[1:]
        sens = S[1:].reshape(self.N * self.model.n, z.size)
        g = [(states - self.hi).ravel(), (self.lo - states).ravel()]
        J = [sens, -sens]
        if self.bound is not None:
            v, gr = self.auxiliary(z)
            g.append(np.array([v - self.bound]))
            J.append(gr[None, :])
        if self.explicit_terminal:
            dxN = X[self.N] - self.ing.x_s
            g.append(np.array([dxN @ self.ing.cost.P @ dxN - self.ing.sets.a]))
            J.append((2.0 * self.ing.cost.P @ dxN @ S[self.N])[None, :])
        return np.concatenate(g), np.vstack(J)


def _make_solution(model, ing, x0, U, cost, N, status, mode, bound, viol, elapsed, iterations) -> FheocSolution:
    X = rollout(model, x0, U)
    V_e = float(sum(cost.stage(X[i], U[i])[0] for i in range(N)))
    V_a = float(sum(ing.La(X[i], U[i]) for i in range(N)) + ing.lam * ing.Ea(X[N]))
    h = hits(ing, X)
    return FheocSolution(
        u_star=np.array(U),
        x_star=X,
        V_e=V_e,
        V_a_e=V_a,
        hit_indices=h,
        t_first=h[0] if h else None,
        status=status,
        N=N,
        mode=mode,
        bound=bound,
        max_violation=viol,
        solve_time=elapsed,
        iterations=iterations,
    )


def solve_fheoc(
    problem: FheocProblem,
    warm_start,
    tol_kkt: float = 1e-6,
    tol_feas: float = 1e-8,
    max_iter: int = 100,
) -> FheocSolution:
    """Minimise the economic cost over N inputs under all FHEOC rows.

    If the solver ends worse than a feasible warm start, the warm start is
    returned instead so the contract ``V_e <= J_e(warm start)`` holds.
    """
    model, ing, N = problem.model, problem.ingredients, problem.N
    warm = np.atleast_2d(np.asarray(warm_start, dtype=float)).reshape(N, model.m)
    warm = np.clip(warm, model.U.lower, model.U.upper)
    ev = _Evaluator(model, ing, problem.x_k, N, problem.cost, problem.bound, problem.explicit_terminal)
    nlp_problem = nlp.NlpProblem(
        dim=N * model.m,
        objective=ev.objective,
        constraints=ev.rows,
        lower=np.tile(model.U.lower, N),
        upper=np.tile(model.U.upper, N),
    )
    start = time.perf_counter()
    sol = nlp.solve(nlp_problem, warm.ravel(), tol_kkt=tol_kkt, tol_feas=tol_feas, max_iter=max_iter)
    elapsed = time.perf_counter() - start
    U = sol.z_star.reshape(N, model.m)
    status = sol.status
    viol = plan_violation(model, ing, problem.x_k, U, problem.bound, problem.explicit_terminal, ev.boxes)
    warm_viol = plan_violation(model, ing, problem.x_k, warm, problem.bound, problem.explicit_terminal, ev.boxes)
    if warm_viol <= tol_feas:
        warm_obj = eval_Je(problem.x_k, warm, N, problem.cost, model)
        if viol > tol_feas or sol.objective_value > warm_obj:
            U, viol = warm, warm_viol
            status = "fallback_feasible" if status != "optimal" else status
    if viol > tol_feas and status != "infeasible":
        status = "infeasible"
    return _make_solution(
        model, ing, problem.x_k, U, problem.cost, N, status, problem.mode, problem.bound, viol, elapsed, sol.iterations
    )


def solve_auxiliary(
    model: SystemModel,
    ingredients: Ingredients,
    x0,
    N: int,
    warm_start=None,
    tol_feas: float = 1e-8,
    max_iter: int = 100,
) -> tuple[np.ndarray, float, bool]:
    """Minimise the auxiliary cost under the tightened state rows.

    Returns ``(inputs, value, feasible)``. Used offline for the upper
    comparison function and online to restore feasibility at start-up.
    """
    if warm_start is None:
        warm_start = terminal_law_rollout(model, ingredients, x0, N)[0]
    warm = np.clip(np.atleast_2d(warm_start).reshape(N, model.m), model.U.lower, model.U.upper)
    ev = _Evaluator(model, ingredients, x0, N, None, None, False)
    problem = nlp.NlpProblem(
        dim=N * model.m,
        objective=ev.auxiliary,
        constraints=ev.rows,
        lower=np.tile(model.U.lower, N),
        upper=np.tile(model.U.upper, N),
    )
    sol = nlp.solve(problem, warm.ravel(), tol_feas=tol_feas, max_iter=max_iter)
    U = sol.z_star.reshape(N, model.m)
    viol = plan_violation(model, ingredients, x0, U, None, False, ev.boxes)
    value = eval_Ja(x0, U, N, ingredients, model)
    return U, value, viol <= tol_feas


def estimate_alpha2(
    model: SystemModel,
    ingredients: Ingredients,
    horizons,
    sample_count: int,
    seed: int,
    safety: float = 1.05,
) -> float:
    """Quadratic upper envelope of the optimal auxiliary cost over feasible states."""
    rng = np.random.default_rng(seed)
    horizons = sorted(set(horizons))
    if len(horizons) > 6:
        picks = np.unique(np.linspace(0, len(horizons) - 1, 6).round().astype(int))
        horizons = [horizons[i] for i in picks]
    box = tightened_box(model.X, 1, ingredients.L_f, ingredients.delta_bar)
    best = 0.0
    xs = box.sample(rng, sample_count)
    # points near the steady state dominate the quadratic ratio
    xs[: sample_count // 2] = box.clip(model.x_s + (xs[: sample_count // 2] - model.x_s) * 0.1)
    for x in xs:
        r2 = float(np.sum((x - model.x_s) ** 2))
        if r2 < 1e-10:
            continue
        for N in horizons:
            _, value, ok = solve_auxiliary(model, ingredients, x, N, max_iter=60)
            if ok:
                best = max(best, value / r2)
    if best <= 0:
        raise ValueError("no feasible sample for the upper comparison function")
    return safety * best


# ---------------------------------------------------------------------------
# Candidates
# ---------------------------------------------------------------------------


def terminal_law_rollout(model: SystemModel, ingredients: Ingredients, x0, steps: int, u_prefix=None):
    """Apply ``u_prefix`` then the terminal law for the remaining steps.

    Returns ``(inputs, states, clipped)``; law outputs outside U are clipped.
    """
    u_prefix = np.zeros((0, model.m)) if u_prefix is None else np.atleast_2d(u_prefix).reshape(-1, model.m)
    x = np.asarray(x0, dtype=float)
    inputs, states = [], [x]
    clipped = False
    for i in range(steps):
        if i < len(u_prefix):
            u = u_prefix[i]
        else:
            u = ingredients.law(x)
            if not model.U.contains(u):
                clipped = True
                u = model.U.clip(u)
        inputs.append(u)
        x = step_nominal(model, x, u)
        states.append(x)
    return np.array(inputs).reshape(steps, model.m), np.array(states), clipped


def build_candidate(
    prev: FheocSolution,
    x_next,
    N_next: int,
    case: str,
    ingredients: Ingredients,
    model: SystemModel,
    t_first: Optional[int] = None,
) -> CandidatePlan:
    """Shifted-and-spliced input plan anchored at the measured next state.

    ``case1``: terminal law throughout. ``case2``: the previous optimal inputs
    ``u*_1 .. u*_{t-1}`` followed by the terminal law, with ``t`` the last
    terminal hit that both horizons can reach.
    """
    if N_next < 1:
        raise ValueError("horizon must be >= 1")
    if case == "case1":
        u_bar, x_bar, clipped = terminal_law_rollout(model, ingredients, x_next, N_next)
        t_last = None
    elif case == "case2":
        t_first = prev.t_first if t_first is None else t_first
        if t_first is None:
            raise ValueError("case2 candidate needs a terminal hit in the previous plan")
        t_last = last_hit(prev, N_next, t_first)
        prefix = prev.u_star[1:t_last]
        u_bar, x_bar, clipped = terminal_law_rollout(model, ingredients, x_next, N_next, prefix)
    else:
        raise ValueError(f"unknown case {case!r}")
    if clipped:
        logger.debug("terminal law left U during candidate rollout; inputs clipped")
    J = float(sum(ingredients.La(x_bar[i], u_bar[i]) for i in range(N_next)) + ingredients.lam * ingredients.Ea(x_bar[N_next]))
    return CandidatePlan(u_bar=u_bar, x_bar=x_bar, J_a_value=J, t_last=t_last, case=case, clipped=clipped)


def compute_pi_bound(V_prev: float, xi_prev: float, J_a_candidate: float, mu: float, delta_bar: float) -> float:
    """Blend of the previous auxiliary value (plus disturbance slack) and the candidate cost."""
    values = (V_prev, xi_prev, J_a_candidate, mu, delta_bar)
    if not all(np.isfinite(v) for v in values):
        raise ValueError("contraction bound inputs must be finite")
    return (1.0 - mu) * (V_prev + delta_bar * xi_prev) + mu * J_a_candidate
