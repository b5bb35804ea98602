"""Dense SQP solver with a primal active-set QP subsolver.

The nonlinear problem is ``min f(z)`` subject to ``g(z) <= 0`` and simple
bounds. Each SQP iteration solves an elastic QP (one slack on the linearised
rows) so the subproblem is always feasible, then searches along the step on an
l1 merit function. Bounds are never violated by accepted iterates.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STATUSES = ("optimal", "max_iter", "fallback_feasible", "infeasible")


class QPCyclingError(RuntimeError):
    """The active-set QP exceeded its pivot budget."""


class QPInfeasibleError(RuntimeError):
    """No point satisfies the QP constraints."""


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    multipliers: np.ndarray  # one per row of the stacked constraint matrix
    working_set: list
    pivots: int


def _regularize(H: np.ndarray) -> np.ndarray:
    H = 0.5 * (H + H.T)
    lam_min = float(np.linalg.eigvalsh(H)[0])
    tau = max(0.0, 1e-8 - lam_min)
    if tau > 0:
        H = H + tau * np.eye(H.shape[0])
    return H


def _stack_constraints(n, A, b, lb, ub):
    rows = []
    rhs = []
    if A is not None and len(A):
        rows.append(np.atleast_2d(np.asarray(A, dtype=float)))
        rhs.append(np.asarray(b, dtype=float).ravel())
    n_general = rows[0].shape[0] if rows else 0
    if lb is not None:
        lb = np.asarray(lb, dtype=float)
        idx = np.flatnonzero(np.isfinite(lb))
        rows.append(-np.eye(n)[idx])
        rhs.append(-lb[idx])
    if ub is not None:
        ub = np.asarray(ub, dtype=float)
        idx = np.flatnonzero(np.isfinite(ub))
        rows.append(np.eye(n)[idx])
        rhs.append(ub[idx])
    if rows:
        return np.vstack(rows), np.concatenate(rhs), n_general
    return np.zeros((0, n)), np.zeros(0), 0


def _active_set_core(H, g, C, d, x, working, max_pivots):
    """Primal active-set iterations from a feasible ``x``."""
    n = x.size
    mult = np.zeros(C.shape[0])
    pivots = 0
    while True:
        if pivots > max_pivots:
            raise QPCyclingError(f"active-set QP exceeded {max_pivots} pivots")
        pivots += 1
        gx = H @ x + g
        k = len(working)
        if k:
            Cw = C[working]
            K = np.zeros((n + k, n + k))
            K[:n, :n] = H
            K[:n, n:] = Cw.T
            K[n:, :n] = Cw
            rhs = np.concatenate([-gx, np.zeros(k)])
            try:
                sol = np.linalg.solve(K, rhs)
                if not np.all(np.isfinite(sol)):
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            p, lam = sol[:n], sol[n:]
        else:
            p = np.linalg.solve(H, -gx)
            lam = np.zeros(0)
        if np.max(np.abs(p)) <= 1e-12 * (1.0 + np.max(np.abs(x))):
            if k == 0 or lam.min() >= -1e-10 * (1.0 + np.max(np.abs(gx))):
                mult[:] = 0.0
                if k:
                    mult[working] = np.maximum(lam, 0.0)
                return x, mult, working, pivots
            # drop the most negative multiplier, smallest index on ties
            j = int(np.argmin(lam))
            working = working[:j] + working[j + 1 :]
            continue
        Cp = C @ p
        slack = d - C @ x
        mask = Cp > 1e-14 * (1.0 + np.abs(slack))
        if working:
            mask[working] = False
        alpha = 1.0
        block = -1
        if np.any(mask):
            idx = np.flatnonzero(mask)
            ratios = np.maximum(slack[idx], 0.0) / Cp[idx]
            r = int(np.argmin(ratios))
            if ratios[r] < 1.0:
                alpha = float(ratios[r])
                block = int(idx[r])
        x = x + alpha * p
        if block >= 0:
            working = working + [block]


def _initial_working(C, d, x, tol):
    if C.shape[0] == 0:
        return []
    active = np.flatnonzero(np.abs(C @ x - d) <= tol)
    working = []
    for i in active:
        trial = working + [int(i)]
        if np.linalg.matrix_rank(C[trial]) == len(trial):
            working = trial
        if len(working) == C.shape[1]:
            break
    return working


def solve_qp(
    H,
    g,
    A=None,
    b=None,
    lb=None,
    ub=None,
    x0=None,
    max_pivots: Optional[int] = None,
) -> QPResult:
    """Minimise ``0.5 x'Hx + g'x`` subject to ``A x <= b`` and ``lb <= x <= ub``.

    ``H`` is shifted by ``tau I`` with ``tau = max(0, 1e-8 - lambda_min(H))``.
    When ``x0`` is missing or infeasible a feasible start is found first by an
    elastic phase that minimises the largest row violation.
    """
    H = _regularize(np.atleast_2d(np.asarray(H, dtype=float)))
    g = np.asarray(g, dtype=float).ravel()
    n = g.size
    C, d, _ = _stack_constraints(n, A, b, lb, ub)
    if max_pivots is None:
        max_pivots = 10 * n + 10
    if lb is not None and ub is not None and np.any(np.asarray(lb) > np.asarray(ub)):
        raise QPInfeasibleError("lower bound exceeds upper bound")
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if lb is not None:
        x = np.maximum(x, lb)
    if ub is not None:
        x = np.minimum(x, ub)
    tol = 1e-10 * (1.0 + (np.max(np.abs(d)) if d.size else 0.0))
    if C.shape[0] and np.max(C @ x - d) > tol:
        x = _phase_one(C, d, x, n, tol, max_pivots)
    working = _initial_working(C, d, x, tol)
    x, mult, working, pivots = _active_set_core(H, g, C, d, x, working, max_pivots)
    return QPResult(x, float(0.5 * x @ H @ x + g @ x), mult, working, pivots)


def _phase_one(C, d, x, n, tol, max_pivots):
    viol = float(np.max(C @ x - d))
    Ce = np.hstack([C, -np.ones((C.shape[0], 1))])
    Ce = np.vstack([Ce, np.concatenate([np.zeros(n), [-1.0]])])
    de = np.concatenate([d, [0.0]])
    He = np.eye(n + 1) * 1e-8
    ge = np.concatenate([-1e-8 * x, [1.0]])
    z = np.concatenate([x, [viol]])
    working = _initial_working(Ce, de, z, 1e-12 * (1 + viol))
    z, _, _, _ = _active_set_core(He, ge, Ce, de, z, working, 20 * max_pivots)
    if z[-1] > tol:
        raise QPInfeasibleError(f"QP constraints infeasible (residual {z[-1]:.3g})")
    return z[:n]


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------


@dataclass
class NlpProblem:
    """``min f(z)`` s.t. ``g(z) <= 0`` and ``lower <= z <= upper``.

    ``objective(z) -> (value, gradient)``; ``constraints(z) -> (g, J)`` with
    ``J`` of shape ``(n_constraints, dim)``. Use :func:`stack_constraints` to
    build the vectorised callback from a list of scalar callbacks.
    """

    dim: int
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    constraints: Optional[Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def eval_constraints(self, z):
        if self.constraints is None:
            return np.zeros(0), np.zeros((0, self.dim))
        gval, J = self.constraints(z)
        return np.asarray(gval, dtype=float).ravel(), np.atleast_2d(np.asarray(J, dtype=float))


def stack_constraints(callbacks: Sequence[Callable]) -> Callable:
    """Turn scalar callbacks ``z -> (value, gradient)`` into one vector callback."""

    def combined(z):
        vals, grads = zip(*(cb(z) for cb in callbacks))
        return np.asarray(vals, dtype=float), np.vstack([np.ravel(gr) for gr in grads])

    return combined


@dataclass
class NlpSolution:
    z_star: np.ndarray
    objective_value: float
    kkt_residual: float
    max_violation: float
    status: str
    iterations: int = 0
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log: list = field(default_factory=list)


def _violation(gval):
    return float(max(0.0, gval.max())) if gval.size else 0.0


def _kkt(grad, J, lam, gval, z, lower, upper):
    r = grad + (J.T @ lam if lam.size else 0.0)
    at_lo = np.zeros(z.size, bool) if lower is None else z <= lower + 1e-12 * (1 + np.abs(lower))
    at_hi = np.zeros(z.size, bool) if upper is None else z >= upper - 1e-12 * (1 + np.abs(upper))
    res = np.abs(r)
    res[at_lo] = np.maximum(-r[at_lo], 0.0)
    res[at_hi] = np.maximum(r[at_hi], 0.0)
    stat = float(res.max()) if res.size else 0.0
    comp = float(np.max(np.abs(lam * np.minimum(gval, 0.0)))) if lam.size else 0.0
    gscale = 1.0 + (float(np.max(np.abs(grad))) if grad.size else 0.0)
    return max(stat, comp) / gscale


def solve(
    problem: NlpProblem,
    z0,
    tol_kkt: float = 1e-6,
    tol_feas: float = 1e-8,
    max_iter: int = 100,
    hessian0: Optional[np.ndarray] = None,
    log_path=None,
) -> NlpSolution:
    """Solve ``problem`` from ``z0`` by SQP.

    Tracks the best feasible iterate; if the final iterate is infeasible that
    one is returned with status ``fallback_feasible``.
    """
    n = problem.dim
    lower = None if problem.lower is None else np.asarray(problem.lower, dtype=float)
    upper = None if problem.upper is None else np.asarray(problem.upper, dtype=float)
    z = np.asarray(z0, dtype=float).copy()
    if lower is not None:
        z = np.maximum(z, lower)
    if upper is not None:
        z = np.minimum(z, upper)

    f, grad = problem.objective(z)
    gval, J = problem.eval_constraints(z)
    B = np.eye(n) if hessian0 is None else np.array(hessian0, dtype=float)
    rho = 10.0
    lam = np.zeros(gval.size)
    best = None
    log = []
    status = "max_iter"
    kkt = np.inf
    it = 0

    def record(z, f, gval):
        nonlocal best
        v = _violation(gval)
        if v <= tol_feas and (best is None or f < best[1]):
            best = (z.copy(), f)

    record(z, f, gval)
    for it in range(1, max_iter + 1):
        viol = _violation(gval)
        # elastic QP in (d, t): rows J d - t <= -g, t >= 0
        m = gval.size
        Hq = np.zeros((n + 1, n + 1))
        Hq[:n, :n] = B
        Hq[n, n] = 1e-8
        gq = np.concatenate([grad, [rho]])
        if m:
            Aq = np.hstack([J, -np.ones((m, 1))])
            Aq = np.vstack([Aq, np.concatenate([np.zeros(n), [-1.0]])])
            bq = np.concatenate([-gval, [0.0]])
        else:
            Aq, bq = None, None
        lbq = np.concatenate([(lower - z) if lower is not None else np.full(n, -np.inf), [-np.inf]])
        ubq = np.concatenate([(upper - z) if upper is not None else np.full(n, np.inf), [np.inf]])
        if not m:
            lbq[n] = ubq[n] = 0.0
        x0q = np.concatenate([np.zeros(n), [viol]])
        try:
            qp = solve_qp(Hq, gq, Aq, bq, lbq, ubq, x0=x0q, max_pivots=10 * (n + 1) + 2 * (m + 1) + 10)
        except (QPCyclingError, np.linalg.LinAlgError) as exc:
            logger.debug("QP subproblem failed: %s", exc)
            status = "max_iter"
            break
        step = qp.x[:n]
        lam_new = qp.multipliers[:m] if m else np.zeros(0)
        kkt = _kkt(grad, J, lam_new, gval, z, lower, upper)
        log.append((it - 1, f, kkt, viol))
        if kkt <= tol_kkt and viol <= tol_feas:
            lam = lam_new
            status = "optimal"
            break
        if np.max(np.abs(step)) <= 1e-12 * (1.0 + np.max(np.abs(z))):
            lam = lam_new
            status = "optimal" if (viol <= tol_feas and kkt <= 10 * tol_kkt) else "max_iter"
            break
        if m:
            rho = max(rho, 2.0 * float(np.max(lam_new)) + 1.0)

        def merit(fv, gv):
            return fv + rho * float(np.sum(np.maximum(gv, 0.0)))

        phi0 = merit(f, gval)
        lin = gval + J @ step if m else gval
        D = grad @ step - rho * (np.sum(np.maximum(gval, 0.0)) - np.sum(np.maximum(lin, 0.0)))
        if D >= 0:
            D = -1e-12 * (1 + abs(phi0))
        alpha = 1.0
        accepted = False
        soc_tried = False
        while alpha >= 1e-10:
            z_try = z + alpha * step
            if lower is not None:
                z_try = np.maximum(z_try, lower)
            if upper is not None:
                z_try = np.minimum(z_try, upper)
            f_try, grad_try = problem.objective(z_try)
            g_try, J_try = problem.eval_constraints(z_try)
            if np.isfinite(f_try) and merit(f_try, g_try) <= phi0 + 1e-4 * alpha * D:
                accepted = True
                break
            if alpha == 1.0 and not soc_tried and m and np.all(np.isfinite(g_try)):
                soc_tried = True
                active = np.flatnonzero(lam_new > 0)
                if active.size:
                    corr = np.linalg.lstsq(J[active], -g_try[active] + 0.0, rcond=None)[0]
                    z_soc = z_try + corr
                    if lower is not None:
                        z_soc = np.maximum(z_soc, lower)
                    if upper is not None:
                        z_soc = np.minimum(z_soc, upper)
                    f_s, grad_s = problem.objective(z_soc)
                    g_s, J_s = problem.eval_constraints(z_soc)
                    if np.isfinite(f_s) and merit(f_s, g_s) <= phi0 + 1e-4 * D:
                        z_try, f_try, grad_try, g_try, J_try = z_soc, f_s, grad_s, g_s, J_s
                        accepted = True
                        break
            alpha *= 0.5
        if not accepted:
            status = "max_iter"
            break
        s = z_try - z
        # damped BFGS on the Lagrangian gradient
        lag_old = grad + (J.T @ lam_new if m else 0.0)
        lag_new = grad_try + (J_try.T @ lam_new if m else 0.0)
        y = lag_new - lag_old
        Bs = B @ s
        sBs = float(s @ Bs)
        sy = float(s @ y)
        if sBs > 1e-300:
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1 - theta) * Bs
                sy = float(s @ y)
            if sy > 1e-300:
                B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
                B = 0.5 * (B + B.T)
        z, f, grad, gval, J = z_try, f_try, grad_try, g_try, J_try
        lam = lam_new
        record(z, f, gval)
    else:
        status = "max_iter"

    viol = _violation(gval)
    if status != "optimal" and viol > tol_feas:
        if best is not None:
            z, f = best
            gval, _ = problem.eval_constraints(z)
            viol = _violation(gval)
            status = "fallback_feasible"
        else:
            status = "infeasible"
    if log_path is not None:
        write_iteration_log(log, log_path)
    return NlpSolution(
        z_star=z,
        objective_value=float(f),
        kkt_residual=float(kkt),
        max_violation=viol,
        status=status,
        iterations=it,
        multipliers=lam,
        log=log,
    )


def write_iteration_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "kkt_residual", "violation"])
        for row in log:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def check_gradient(fun, z, h: float = 1e-6) -> float:
    """Largest relative gap between an analytic gradient/Jacobian and central differences."""
    z = np.asarray(z, dtype=float)
    val, grad = fun(z)
    grad = np.atleast_2d(np.asarray(grad, dtype=float))
    val = np.atleast_1d(np.asarray(val, dtype=float))
    fd = np.zeros((val.size, z.size))
    for j in range(z.size):
        e = np.zeros(z.size)
        step = h * (1.0 + abs(z[j]))
        e[j] = step
        fd[:, j] = (np.atleast_1d(fun(z + e)[0]) - np.atleast_1d(fun(z - e)[0])) / (2 * step)
    return float(np.max(np.abs(fd - grad.reshape(fd.shape)) / (1.0 + np.abs(fd))))
