"""Offline stabilising ingredients for the varying-horizon controller.

Quadratic auxiliary costs around the steady state, an LQR terminal law, the
terminal level sets, Lipschitz constants of the auxiliary costs and the two
sets of admissible horizons.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import BoxSet, SystemModel, jacobians, step_nominal

logger = logging.getLogger(__name__)


class RiccatiError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadCost:
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        for name in ("Q", "R", "P"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.allclose(M, M.T, atol=1e-10 * (1 + np.abs(M).max())):
                raise ValueError(f"{name} must be symmetric")
            object.__setattr__(self, name, 0.5 * (M + M.T))
        if self.lam < 1.0:
            raise ValueError("terminal weight lambda must be >= 1")
        if np.linalg.eigvalsh(self.Q)[0] < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.R)[0] <= 0 or np.linalg.eigvalsh(self.P)[0] <= 0:
            raise ValueError("R and P must be positive definite")


@dataclass(frozen=True)
class TerminalLaw:
    """``pi(x) = u_s - K (x - x_s)``."""

    K: np.ndarray
    x_s: np.ndarray
    u_s: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return self.u_s - self.K @ (np.asarray(x, dtype=float) - self.x_s)


@dataclass(frozen=True)
class TerminalSets:
    a_p: float
    a: float
    d: float

    def __post_init__(self):
        if not (0 < self.a <= self.a_p):
            raise ValueError("terminal levels must satisfy 0 < a <= a_p")
        if self.d <= 0:
            raise ValueError("stage-cost floor d must be positive")


@dataclass(frozen=True)
class LipschitzConsts:
    c_L: float
    c_E: float


@dataclass(frozen=True)
class KBounds:
    """Quadratic comparison functions ``gamma_0(s) = g s^2`` and ``alpha_2(s) = a s^2``."""

    gamma0_coeff: float
    alpha2_coeff: float

    def __post_init__(self):
        if not (0 < self.gamma0_coeff <= self.alpha2_coeff):
            raise ValueError("need 0 < gamma0_coeff <= alpha2_coeff")

    def check_mu(self, mu: float) -> bool:
        return mu * self.gamma0_coeff / self.alpha2_coeff < 1.0


@dataclass(frozen=True)
class HorizonSets:
    N_max: int
    gamma_set: tuple
    theta_set: tuple

    @property
    def admissible(self) -> tuple:
        return tuple(sorted(set(self.gamma_set) & set(self.theta_set)))


# ---------------------------------------------------------------------------
# LQR and auxiliary costs
# ---------------------------------------------------------------------------


def solve_dlqr(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10000) -> tuple[np.ndarray, np.ndarray]:
    """Riccati fixed-point iteration; returns ``(P, K)`` with ``A - B K`` Schur."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next))):
            P = P_next
            break
        P = P_next
    else:
        raise RiccatiError(f"Riccati iteration did not converge in {max_iter} iterations")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    return P, K


def riccati_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(rhs - P)))


def eval_La(cost: QuadCost, x_s, u_s, x, u) -> float:
    dx = np.asarray(x, dtype=float) - x_s
    du = np.asarray(u, dtype=float) - u_s
    return float(dx @ cost.Q @ dx + du @ cost.R @ du)


def eval_Ea(cost: QuadCost, x_s, x) -> float:
    dx = np.asarray(x, dtype=float) - x_s
    return float(dx @ cost.P @ dx)


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------


def sample_ellipsoid(P, center, level, rng, count, boundary_fraction=0.5) -> np.ndarray:
    """Points with ``(x - c)' P (x - c) <= level``; a share lies on the boundary."""
    n = P.shape[0]
    L = np.linalg.cholesky(P)
    v = rng.normal(size=(count, n))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.uniform(size=count) ** (1.0 / n)
    r[: int(boundary_fraction * count)] = 1.0
    y = v * (r * math.sqrt(level))[:, None]
    # x'Px = y'y with x = L^{-T} y
    return center + np.linalg.solve(L.T, y.T).T


def ellipsoid_half_widths(P, level) -> np.ndarray:
    """Half-widths of the bounding box of ``{x : x'Px <= level}``."""
    return np.sqrt(level * np.diag(np.linalg.inv(P)))


def tightening_margin(i: int, L_f: float, delta_bar: float) -> float:
    """Radius of the ball removed from X at prediction step ``i``."""
    if i < 0:
        raise ValueError("prediction index must be non-negative")
    if abs(L_f - 1.0) < 1e-9:
        return i * delta_bar
    return (L_f**i - 1.0) / (L_f - 1.0) * delta_bar


def tightened_box(X: BoxSet, i: int, L_f: float, delta_bar: float) -> BoxSet:
    return X.shrink(tightening_margin(i, L_f, delta_bar))


def _level_fits_box(P, x_s, level, box: BoxSet) -> bool:
    hw = ellipsoid_half_widths(P, level)
    return bool(np.all(x_s - hw >= box.lower - 1e-15) and np.all(x_s + hw <= box.upper + 1e-15))


def _max_level_in_box(P, x_s, box: BoxSet) -> float:
    Pinv_diag = np.diag(np.linalg.inv(P))
    room = np.minimum(x_s - box.lower, box.upper - x_s)
    if np.any(room <= 0):
        return 0.0
    return float(np.min(room**2 / Pinv_diag))


def _max_level_for_law(P, law: TerminalLaw, U: BoxSet) -> float:
    Pinv = np.linalg.inv(P)
    spread = np.einsum("ij,jk,ik->i", law.K, Pinv, law.K)
    room = np.minimum(law.u_s - U.lower, U.upper - law.u_s)
    if np.any(room <= 0):
        return 0.0
    with np.errstate(divide="ignore"):
        levels = np.where(spread > 0, room**2 / spread, np.inf)
    return float(np.min(levels))


def decrease_margin(model: SystemModel, cost: QuadCost, law: TerminalLaw, x) -> float:
    """``lam (E(f(x, pi x)) - E(x)) + L_a(x, pi x)``; non-positive where the law decreases."""
    u = law(x)
    x_next = step_nominal(model, x, u)
    return cost.lam * (eval_Ea(cost, model.x_s, x_next) - eval_Ea(cost, model.x_s, x)) + eval_La(
        cost, model.x_s, model.u_s, x, u
    )


def estimate_terminal_sets(
    model: SystemModel,
    cost: QuadCost,
    law: TerminalLaw,
    sample_count: int,
    seed: int,
    containment: Optional[BoxSet] = None,
    tol: float = 1e-8,
) -> TerminalSets:
    """Terminal levels ``(a_p, a, d)`` from closed-form bounds plus sampling.

    ``a_p`` is the largest level whose ellipsoid fits ``containment`` (X by
    default), maps into U under the law, and passes the sampled decrease test.
    ``a`` is the sampled maximum of E over the one-step image of that set.
    """
    rng = np.random.default_rng(seed)
    box = model.X if containment is None else containment
    level = min(_max_level_in_box(cost.P, model.x_s, box), _max_level_for_law(cost.P, law, model.U))
    if not np.isfinite(level) or level <= 0:
        raise ValueError("no terminal level satisfies the state and input constraints")

    def passes(lvl):
        pts = sample_ellipsoid(cost.P, model.x_s, lvl, rng, sample_count)
        return all(decrease_margin(model, cost, law, x) <= tol for x in pts)

    hi = level
    if not passes(hi):
        lo = 0.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if passes(mid):
                lo = mid
            else:
                hi = mid
        if lo <= 0:
            raise ValueError("terminal law does not decrease the auxiliary cost near the steady state")
        hi = lo
    a_p = hi
    pts = sample_ellipsoid(cost.P, model.x_s, a_p, rng, sample_count)
    a = max(eval_Ea(cost, model.x_s, step_nominal(model, x, law(x))) for x in pts)
    a = min(a, a_p)
    d = a * float(np.min(np.linalg.eigvals(np.linalg.solve(cost.P, cost.Q)).real))
    if d <= 0:
        raise ValueError("Q is singular; the stage-cost floor vanishes")
    return TerminalSets(a_p=float(a_p), a=float(a), d=float(d))


def min_stage_cost_outside(cost: QuadCost, model: SystemModel, a: float, sample_count: int, seed: int) -> float:
    """Sampled minimum of the auxiliary stage cost over X minus the terminal set."""
    rng = np.random.default_rng(seed)
    xs = model.X.sample(rng, sample_count)
    # add points just outside the terminal ellipsoid, where the minimum sits
    shell = sample_ellipsoid(cost.P, model.x_s, a * (1 + 1e-9), rng, sample_count, boundary_fraction=1.0)
    best = np.inf
    for x in np.vstack([xs, shell]):
        if eval_Ea(cost, model.x_s, x) > a and model.X.contains(x):
            best = min(best, eval_La(cost, model.x_s, model.u_s, x, model.u_s))
    return float(best)


def estimate_cLcE(
    cost: QuadCost, x_s, u_s, X: BoxSet, a_p: float, sample_count: int, seed: int, safety: float = 1.05
) -> LipschitzConsts:
    """Sampled difference quotients of L_a over X and of E_a over the level set ``a_p``."""
    rng = np.random.default_rng(seed)
    half = sample_count // 2
    x1 = X.sample(rng, sample_count)
    x2 = np.vstack([X.sample(rng, half), X.clip(x1[half:] + 1e-5 * rng.normal(size=x1[half:].shape))])
    u = np.asarray(u_s, dtype=float)
    c_L = 0.0
    for p, q in zip(x1, x2):
        dist = np.linalg.norm(p - q)
        if dist > 1e-14:
            c_L = max(c_L, abs(eval_La(cost, x_s, u_s, p, u) - eval_La(cost, x_s, u_s, q, u)) / dist)
    c_E = 0.0
    if a_p > 0:
        y1 = sample_ellipsoid(cost.P, x_s, a_p, rng, sample_count)
        y2 = np.vstack([sample_ellipsoid(cost.P, x_s, a_p, rng, half), y1[half:]])
        y2[half:] += 1e-7 * rng.normal(size=y2[half:].shape)
        for p, q in zip(y1, y2):
            dist = np.linalg.norm(p - q)
            if dist > 1e-14:
                c_E = max(c_E, abs(eval_Ea(cost, x_s, p) - eval_Ea(cost, x_s, q)) / dist)
    if c_E <= 0:
        logger.warning("terminal set has no extent; c_E floored at machine epsilon")
        c_E = np.finfo(float).eps
    return LipschitzConsts(c_L=safety * c_L, c_E=safety * c_E)


# ---------------------------------------------------------------------------
# Horizon sets
# ---------------------------------------------------------------------------


def geometric_sum(L_f: float, i: int) -> float:
    """``(L_f^i - 1) / (L_f - 1)``, equal to ``i`` at ``L_f = 1``."""
    if abs(L_f - 1.0) < 1e-9:
        return float(i)
    return (L_f**i - 1.0) / (L_f - 1.0)


def xi(N: int, consts: LipschitzConsts, lam: float, L_f: float) -> float:
    """Sensitivity of the auxiliary cost-to-go to a one-step disturbance at horizon N."""
    if N < 1:
        raise ValueError("horizon must be >= 1")
    return lam * consts.c_E * L_f ** (N - 1) + consts.c_L * geometric_sum(L_f, N - 1)


def terminal_set_fits(P, x_s, a_p: float, box: BoxSet) -> bool:
    return _level_fits_box(P, x_s, a_p, box)


def compute_gamma_set(
    N_max: int,
    consts: LipschitzConsts,
    sets: TerminalSets,
    L_f: float,
    delta_bar: float,
    P: np.ndarray,
    x_s: np.ndarray,
    X: BoxSet,
) -> tuple:
    """Horizons for which the disturbance cannot push a terminal-set state out
    of X_p and X_p still fits the box ``X_N`` imposed on the last predicted state."""
    out = []
    for N in range(1, N_max + 1):
        spill = max(consts.c_E * L_f ** (i - 1) * delta_bar for i in range(1, N + 1))
        if spill > sets.a_p - sets.a:
            break
        margin = tightening_margin(N, L_f, delta_bar)
        room = np.minimum(x_s - X.lower, X.upper - x_s) - margin
        if np.any(room < 0) or np.any(ellipsoid_half_widths(P, sets.a_p) > room + 1e-15):
            break
        out.append(N)
    if not out:
        logger.warning("admissible horizon set Gamma is empty")
    return tuple(out)


def compute_theta_set(
    N_max: int,
    mu: float,
    bounds: KBounds,
    delta_bar: float,
    sets: TerminalSets,
    consts: LipschitzConsts,
    lam: float,
    L_f: float,
) -> tuple:
    """Horizons whose ultimate auxiliary-cost level stays below ``N d + lam a``."""
    if mu <= 0:
        return tuple() if delta_bar > 0 else tuple(range(1, N_max + 1))
    out = []
    for N in range(1, N_max + 1):
        lhs = bounds.alpha2_coeff * delta_bar * xi(N, consts, lam, L_f) / (mu * bounds.gamma0_coeff)
        if lhs <= N * sets.d + lam * sets.a:
            out.append(N)
    return tuple(out)


def project_horizon(target: int, allowed) -> Optional[int]:
    """Nearest member of ``allowed``; ties go to the smaller horizon."""
    allowed = sorted(allowed)
    if not allowed:
        return None
    return min(allowed, key=lambda N: (abs(N - target), N))


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ingredients:
    cost: QuadCost
    law: TerminalLaw
    sets: TerminalSets
    consts: LipschitzConsts
    bounds: KBounds
    horizons: HorizonSets
    L_f: float
    delta_bar: float
    x_s: np.ndarray
    u_s: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def lam(self) -> float:
        return self.cost.lam

    def La(self, x, u) -> float:
        return eval_La(self.cost, self.x_s, self.u_s, x, u)

    def Ea(self, x) -> float:
        return eval_Ea(self.cost, self.x_s, x)

    def xi(self, N: int) -> float:
        return xi(N, self.consts, self.cost.lam, self.L_f)

    def contraction_budget(self, N: int) -> float:
        return N * self.sets.d + self.cost.lam * self.sets.a

    def xi_max(self) -> float:
        adm = self.horizons.admissible or (1,)
        return max(self.xi(N) for N in adm)

    def to_dict(self) -> dict:
        return {
            "Q": self.cost.Q.tolist(),
            "R": self.cost.R.tolist(),
            "P": self.cost.P.tolist(),
            "lambda": self.cost.lam,
            "K": self.law.K.tolist(),
            "x_s": self.x_s.tolist(),
            "u_s": self.u_s.tolist(),
            "a_p": self.sets.a_p,
            "a": self.sets.a,
            "d": self.sets.d,
            "c_L": self.consts.c_L,
            "c_E": self.consts.c_E,
            "gamma0_coeff": self.bounds.gamma0_coeff,
            "alpha2_coeff": self.bounds.alpha2_coeff,
            "N_max": self.horizons.N_max,
            "Gamma": list(self.horizons.gamma_set),
            "Theta": list(self.horizons.theta_set),
            "L_f": self.L_f,
            "delta_bar": self.delta_bar,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Ingredients":
        x_s = np.asarray(data["x_s"], dtype=float)
        u_s = np.asarray(data["u_s"], dtype=float)
        return cls(
            cost=QuadCost(np.array(data["Q"]), np.array(data["R"]), np.array(data["P"]), float(data["lambda"])),
            law=TerminalLaw(np.atleast_2d(np.array(data["K"], dtype=float)), x_s, u_s),
            sets=TerminalSets(data["a_p"], data["a"], data["d"]),
            consts=LipschitzConsts(data["c_L"], data["c_E"]),
            bounds=KBounds(data["gamma0_coeff"], data["alpha2_coeff"]),
            horizons=HorizonSets(int(data["N_max"]), tuple(data["Gamma"]), tuple(data["Theta"])),
            L_f=float(data["L_f"]),
            delta_bar=float(data["delta_bar"]),
            x_s=x_s,
            u_s=u_s,
            diagnostics=data.get("diagnostics", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Ingredients":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class IngredientConfig:
    Q: np.ndarray
    R: np.ndarray
    lam: float
    N0: int
    N_max: int
    mu: float = 0.95
    tightening: bool = True
    sample_count: int = 4000
    alpha2_samples: int = 40
    seed: int = 0


def build_ingredients(model: SystemModel, cfg: IngredientConfig) -> Ingredients:
    """Run the full offline pipeline for ``model``.

    With tightening off the design disturbance bound is zero, so every horizon
    up to ``N_max`` passes both horizon tests.
    """
    from .fheoc import estimate_alpha2  # deferred: fheoc depends on this module

    delta_bar = model.delta_bar if cfg.tightening else 0.0
    A, B = jacobians(model, model.x_s, model.u_s)
    P, K = solve_dlqr(A, B, cfg.Q, cfg.R)
    cost = QuadCost(np.asarray(cfg.Q, float), np.asarray(cfg.R, float), P, cfg.lam)
    law = TerminalLaw(K, model.x_s, model.u_s)
    containment = tightened_box(model.X, cfg.N0, model.L_f, delta_bar)
    sets = estimate_terminal_sets(model, cost, law, cfg.sample_count, cfg.seed, containment=containment)
    consts = estimate_cLcE(cost, model.x_s, model.u_s, model.X, sets.a_p, cfg.sample_count, cfg.seed + 1)
    gamma0 = float(np.linalg.eigvalsh(cost.Q)[0])
    gamma_set = compute_gamma_set(cfg.N_max, consts, sets, model.L_f, delta_bar, P, model.x_s, model.X)
    partial = Ingredients(
        cost=cost,
        law=law,
        sets=sets,
        consts=consts,
        bounds=KBounds(gamma0, max(gamma0, 1.0)),
        horizons=HorizonSets(cfg.N_max, gamma_set, gamma_set),
        L_f=model.L_f,
        delta_bar=delta_bar,
        x_s=model.x_s,
        u_s=model.u_s,
    )
    alpha2 = estimate_alpha2(model, partial, gamma_set or (cfg.N0,), cfg.alpha2_samples, cfg.seed + 2)
    bounds = KBounds(gamma0, max(alpha2, gamma0))
    theta_set = compute_theta_set(cfg.N_max, cfg.mu, bounds, delta_bar, sets, consts, cfg.lam, model.L_f)
    horizons = HorizonSets(cfg.N_max, gamma_set, theta_set)
    diagnostics = {
        "riccati_residual": riccati_residual(A, B, cost.Q, cost.R, P),
        "closed_loop_spectral_radius": float(np.max(np.abs(np.linalg.eigvals(A - B @ K)))),
        "d_sampled_min_stage_cost": min_stage_cost_outside(cost, model, sets.a, cfg.sample_count, cfg.seed + 3),
        "N0_admissible": cfg.N0 in horizons.admissible,
        "design_delta_bar": delta_bar,
    }
    if not diagnostics["N0_admissible"]:
        logger.warning("initial horizon %d is not in Gamma and Theta", cfg.N0)
    return Ingredients(
        cost=cost,
        law=law,
        sets=sets,
        consts=consts,
        bounds=bounds,
        horizons=horizons,
        L_f=model.L_f,
        delta_bar=delta_bar,
        x_s=model.x_s,
        u_s=model.u_s,
        diagnostics=diagnostics,
    )
