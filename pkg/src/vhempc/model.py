"""Discrete-time uncertain plants, constraint boxes and the two benchmark scenarios.

Plants are given as a continuous vector field and discretised with explicit
Euler, ``x+ = x + T * rhs(x, u)``; the additive disturbance enters after the
nominal step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

Vector = np.ndarray
Rhs = Callable[[Vector, Vector], Vector]
RhsJacobian = Callable[[Vector, Vector], tuple[np.ndarray, np.ndarray]]


class NumericalDomainError(ValueError):
    """A model evaluation produced non-finite values."""


@dataclass(frozen=True)
class BoxSet:
    lower: Vector
    upper: Vector

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("box bounds have different shapes")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> Vector:
        return self.upper - self.lower

    @property
    def center(self) -> Vector:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def violation(self, x) -> float:
        """Largest amount by which ``x`` leaves the box (0 inside)."""
        x = np.asarray(x, dtype=float)
        return float(max(0.0, np.max(self.lower - x), np.max(x - self.upper)))

    def clip(self, x) -> Vector:
        return np.clip(x, self.lower, self.upper)

    def shrink(self, margin: float) -> "BoxSet":
        """Pontryagin difference with a 2-norm ball of radius ``margin``."""
        lo, hi = self.lower + margin, self.upper - margin
        if np.any(lo > hi):
            raise ValueError(f"box is empty after shrinking by {margin:g}")
        return BoxSet(lo, hi)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class SystemModel:
    """Euler-discretised plant ``x+ = x + T rhs(x, u) + delta``.

    ``jacobian`` (optional) returns the continuous-time Jacobians of ``rhs``
    with respect to ``x`` and ``u``. ``domain_check`` (optional) reports whether
    an evaluation at ``x`` had to clamp an argument (e.g. a negative tank level
    under a square root).
    """

    name: str
    n: int
    m: int
    step_T: float
    continuous_rhs: Rhs
    L_f: float
    delta_bar: float
    X: BoxSet
    U: BoxSet
    x_s: Vector
    u_s: Vector
    jacobian: Optional[RhsJacobian] = None
    domain_check: Optional[Callable[[Vector], bool]] = None
    integrator: str = "euler"

    def __post_init__(self):
        object.__setattr__(self, "x_s", np.asarray(self.x_s, dtype=float))
        object.__setattr__(self, "u_s", np.asarray(self.u_s, dtype=float))
        if self.L_f <= 0:
            raise ValueError("Lipschitz constant must be positive")
        if self.delta_bar < 0:
            raise ValueError("disturbance bound must be non-negative")
        if self.integrator != "euler":
            raise ValueError(f"unsupported integrator {self.integrator!r}")
        if self.X.dim != self.n or self.U.dim != self.m:
            raise ValueError("constraint boxes do not match model dimensions")
        if not self.X.contains(self.x_s) or not self.U.contains(self.u_s):
            raise ValueError("steady state lies outside the constraint boxes")

    def replace(self, **changes) -> "SystemModel":
        from dataclasses import replace

        return replace(self, **changes)


def step_nominal(model: SystemModel, x, u) -> Vector:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x_next = x + model.step_T * np.asarray(model.continuous_rhs(x, u), dtype=float)
    if not np.all(np.isfinite(x_next)):
        raise NumericalDomainError(f"non-finite state after step from x={x}, u={u}")
    return x_next


def step_disturbed(model: SystemModel, x, u, delta) -> Vector:
    return step_nominal(model, x, u) + np.asarray(delta, dtype=float)


def jacobians(model: SystemModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians ``(A, B)`` of the discrete map at ``(x, u)``.

    Uses the analytic callback when the model has one, otherwise central
    differences with step ``1e-6 * (1 + |component|)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if model.jacobian is not None:
        Ac, Bc = model.jacobian(x, u)
        A = np.eye(model.n) + model.step_T * np.asarray(Ac, dtype=float)
        B = model.step_T * np.asarray(Bc, dtype=float)
    else:
        A = np.empty((model.n, model.n))
        B = np.empty((model.n, model.m))
        for j in range(model.n):
            h = 1e-6 * (1.0 + abs(x[j]))
            e = np.zeros(model.n)
            e[j] = h
            A[:, j] = (step_nominal(model, x + e, u) - step_nominal(model, x - e, u)) / (2 * h)
        for j in range(model.m):
            h = 1e-6 * (1.0 + abs(u[j]))
            e = np.zeros(model.m)
            e[j] = h
            B[:, j] = (step_nominal(model, x, u + e) - step_nominal(model, x, u - e)) / (2 * h)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericalDomainError(f"non-finite Jacobian at x={x}, u={u}")
    return A, B


def estimate_lipschitz(
    model: SystemModel, sample_count: int, seed: int, safety: float = 1.05
) -> float:
    """Sampled Lipschitz constant of the discrete map in ``x`` over X x X x U.

    Half the pairs are drawn independently over X, the other half as short
    chords around random points so that local Jacobian norms are represented.
    """
    if sample_count < 2:
        raise ValueError("need at least two samples")
    if np.any(model.X.width <= 0):
        raise ValueError("state box has zero volume")
    rng = np.random.default_rng(seed)
    n_far = sample_count // 2
    n_near = sample_count - n_far
    best = 0.0
    x1 = model.X.sample(rng, sample_count)
    u = model.U.sample(rng, sample_count)
    x2 = np.empty_like(x1)
    x2[:n_far] = model.X.sample(rng, n_far)
    direction = rng.normal(size=(n_near, model.n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    x2[n_far:] = model.X.clip(x1[n_far:] + 1e-4 * np.max(model.X.width) * direction)
    for a, b, v in zip(x1, x2, u):
        dist = np.linalg.norm(a - b)
        if dist < 1e-12:
            continue
        ratio = np.linalg.norm(step_nominal(model, a, v) - step_nominal(model, b, v)) / dist
        best = max(best, ratio)
    return safety * best


def steady_state_residual(model: SystemModel, x=None, u=None) -> float:
    x = model.x_s if x is None else np.asarray(x, dtype=float)
    u = model.u_s if u is None else np.asarray(u, dtype=float)
    return float(np.linalg.norm(step_nominal(model, x, u) - x))


def nearest_equilibrium(model: SystemModel, x_guess, u_guess) -> tuple[Vector, Vector]:
    """Exact equilibrium of the vector field closest to a printed operating point.

    Solves ``rhs(x, u) = 0`` in least squares with a weak pull towards the guess,
    so the returned pair is an equilibrium to solver precision.
    """
    z0 = np.concatenate([x_guess, u_guess]).astype(float)
    n = model.n

    def residual(z):
        r = np.asarray(model.continuous_rhs(z[:n], z[n:])) * 1e4
        return np.concatenate([r, 1e-2 * (z - z0)])

    sol = least_squares(residual, z0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    u = sol.x[n:]
    # polish the state with the input held fixed so the pull term leaves no residual
    polish = least_squares(lambda x: np.asarray(model.continuous_rhs(x, u)), sol.x[:n], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return polish.x, u


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """A plant plus its economic cost, noise and disturbance description.

    ``economic_cost_truth(x, u, noise)`` must be deterministic given ``noise``.
    ``noise_spec`` is ``(low, high)`` for a uniform observation noise, or None.
    """

    id: str
    model: SystemModel
    economic_cost_truth: Callable[[Vector, Vector, float], float]
    disturbance_spec: BoxSet
    noise_spec: Optional[tuple[float, float]] = None
    x0: Optional[Vector] = None
    economic_cost_gradient: Optional[Callable[[Vector, Vector], tuple[Vector, Vector]]] = None
    printed_steady_state: Optional[tuple[Vector, Vector]] = None
    coefficients: dict = field(default_factory=dict)


def delta_bar_from_intervals(lower, upper) -> float:
    """Worst-case 2-norm of a disturbance drawn componentwise from [lower, upper]."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return float(np.linalg.norm(np.maximum(np.abs(lower), np.abs(upper))))


CSTR_COEFFICIENTS = {"c_Af": 1.0, "c_Bf": 0.0, "V_R": 10.0, "k_r": 1.2}


def _cstr_functions(c: dict):
    c_Af, c_Bf, V_R, k_r = c["c_Af"], c["c_Bf"], c["V_R"], c["k_r"]

    def rhs(x, u):
        q = u[0]
        return np.array(
            [
                q * (c_Af - x[0]) / V_R - k_r * x[0],
                q * (c_Bf - x[1]) / V_R + k_r * x[0],
            ]
        )

    def jac(x, u):
        q = u[0]
        A = np.array([[-q / V_R - k_r, 0.0], [k_r, -q / V_R]])
        B = np.array([[(c_Af - x[0]) / V_R], [(c_Bf - x[1]) / V_R]])
        return A, B

    return rhs, jac


def cstr_scenario(
    coefficients: Optional[dict] = None,
    L_f: float = 1.1854,
    disturbance_half_width: float = 1e-4,
) -> Scenario:
    """Bilinear CSTR, T = 0.5 min, economic cost ``-c_B``."""
    c = dict(CSTR_COEFFICIENTS, **(coefficients or {}))
    rhs, jac = _cstr_functions(c)
    w = BoxSet(np.full(2, -disturbance_half_width), np.full(2, disturbance_half_width))
    model = SystemModel(
        name="cstr",
        n=2,
        m=1,
        step_T=0.5,
        continuous_rhs=rhs,
        jacobian=jac,
        L_f=L_f,
        delta_bar=delta_bar_from_intervals(w.lower, w.upper),
        X=BoxSet([0.0, 0.0], [1.0, 1.0]),
        U=BoxSet([0.0], [20.0]),
        x_s=np.array([0.25, 0.75]),
        u_s=np.array([4.0]),
    )

    def truth(x, u, noise=0.0):
        return -float(x[1]) + noise

    def truth_grad(x, u):
        return np.array([0.0, -1.0]), np.zeros(1)

    return Scenario(
        id="cstr",
        model=model,
        economic_cost_truth=truth,
        economic_cost_gradient=truth_grad,
        disturbance_spec=w,
        noise_spec=None,
        x0=np.array([0.40, 0.99]),
        coefficients=c,
    )


FOUR_TANK_COEFFICIENTS = {
    "S": 0.4,
    "g": 9.81,
    "a1": 1.310e-4,
    "a2": 1.507e-4,
    "a3": 9.267e-5,
    "a4": 9.816e-5,
    "gamma_a": 0.3,
    "gamma_b": 0.4,
    "V_min": 0.012,
}
# As printed: tank 3 drains through a1, gamma_a everywhere, a3 an order larger.
FOUR_TANK_PRINTED_COEFFICIENTS = dict(FOUR_TANK_COEFFICIENTS, a3=9.267e-4)
FOUR_TANK_PRINTED_STEADY_STATE = (
    np.array([0.7834, 0.5640, 1.0681, 0.3274]),
    np.array([1.1437, 2.5080]),
)


def _four_tank_functions(c: dict, variant: str):
    S, g = c["S"], c["g"]
    a1, a2, a3, a4 = c["a1"], c["a2"], c["a3"], c["a4"]
    ga = c["gamma_a"]
    gb = c["gamma_b"] if variant == "standard" else c["gamma_a"]
    a_out3 = a3 if variant == "standard" else a1
    if variant not in ("standard", "printed"):
        raise ValueError(f"unknown four-tank variant {variant!r}")

    def rhs(x, u):
        h = np.maximum(x, 0.0)
        r = np.sqrt(2.0 * g * h)
        qa, qb = u[0] / 3600.0, u[1] / 3600.0
        return np.array(
            [
                -a1 * r[0] + a3 * r[2] + ga * qa,
                -a2 * r[1] + a4 * r[3] + gb * qb,
                -a_out3 * r[2] + (1.0 - gb) * qb,
                -a4 * r[3] + (1.0 - ga) * qa,
            ]
        ) / S

    def jac(x, u):
        h = np.maximum(x, 1e-12)
        dr = np.sqrt(2.0 * g) / (2.0 * np.sqrt(h))
        dr = np.where(x > 0, dr, 0.0)
        A = np.zeros((4, 4))
        A[0, 0] = -a1 * dr[0]
        A[0, 2] = a3 * dr[2]
        A[1, 1] = -a2 * dr[1]
        A[1, 3] = a4 * dr[3]
        A[2, 2] = -a_out3 * dr[2]
        A[3, 3] = -a4 * dr[3]
        B = np.array([[ga, 0.0], [0.0, gb], [0.0, 1.0 - gb], [1.0 - ga, 0.0]]) / 3600.0
        return A / S, B / S

    return rhs, jac


def four_tank_scenario(
    coefficients: Optional[dict] = None,
    variant: str = "standard",
    L_f: Optional[float] = None,
    refine_steady_state: bool = True,
) -> Scenario:
    """Quadruple-tank process, T = 10 s, energetic economic cost with noise on [0, 2].

    With ``refine_steady_state`` the printed operating point is replaced by the
    nearest exact equilibrium of the chosen coefficient variant.
    """
    if coefficients is None:
        coefficients = FOUR_TANK_COEFFICIENTS if variant == "standard" else FOUR_TANK_PRINTED_COEFFICIENTS
    c = dict(FOUR_TANK_COEFFICIENTS, **coefficients)
    rhs, jac = _four_tank_functions(c, variant)
    w = BoxSet(np.zeros(4), np.full(4, 5e-3))
    X = BoxSet([0.2, 0.2, 0.2, 0.2], [1.36, 1.36, 1.30, 1.30])
    U = BoxSet([0.0, 0.0], [3.26, 4.0])
    x_p, u_p = FOUR_TANK_PRINTED_STEADY_STATE
    proto = SystemModel(
        name="four_tank",
        n=4,
        m=2,
        step_T=10.0,
        continuous_rhs=rhs,
        jacobian=jac,
        L_f=1.0,
        delta_bar=delta_bar_from_intervals(w.lower, w.upper),
        X=X,
        U=U,
        x_s=x_p,
        u_s=u_p,
        domain_check=lambda x: bool(np.any(np.asarray(x) < 0.0)),
    )
    x_s, u_s = (nearest_equilibrium(proto, x_p, u_p) if refine_steady_state else (x_p, u_p))
    model = proto.replace(x_s=x_s, u_s=u_s)
    if L_f is None:
        L_f = estimate_lipschitz(model, 4000, seed=7)
    model = model.replace(L_f=L_f)
    V_min, S = c["V_min"], c["S"]

    def truth(x, u, noise=0.0):
        return float(u[0] + 0.5 * u[1] ** 2 + 30.0 * V_min / (S * (x[0] + x[1])) + noise)

    def truth_grad(x, u):
        dh = -30.0 * V_min / (S * (x[0] + x[1]) ** 2)
        return np.array([dh, dh, 0.0, 0.0]), np.array([1.0, u[1]])

    return Scenario(
        id="four_tank",
        model=model,
        economic_cost_truth=truth,
        economic_cost_gradient=truth_grad,
        disturbance_spec=w,
        noise_spec=(0.0, 2.0),
        x0=np.array([0.5, 0.51, 1.0, 0.32]),
        printed_steady_state=(x_p, u_p),
        coefficients=dict(c, variant=variant),
    )


def load_scenario(path) -> Scenario:
    """Build a scenario from a JSON definition file.

    Required keys: ``plant`` (``cstr`` or ``four_tank``), ``dimensions``,
    ``sampling_period``, ``coefficients``, ``constraints``, ``steady_state``,
    ``disturbance``; ``lipschitz_override`` and ``initial_state`` are optional.
    """
    spec = json.loads(Path(path).read_text())
    plant = spec.get("plant", "cstr")
    if plant == "cstr":
        base = cstr_scenario(spec.get("coefficients"))
    elif plant == "four_tank":
        base = four_tank_scenario(
            spec.get("coefficients"),
            variant=spec.get("variant", "standard"),
            L_f=spec.get("lipschitz_override"),
            refine_steady_state=spec.get("refine_steady_state", False),
        )
    else:
        raise ValueError(f"unknown plant {plant!r}")
    dims = spec["dimensions"]
    if dims["n"] != base.model.n or dims["m"] != base.model.m:
        raise ValueError("dimensions do not match the plant family")
    cons = spec["constraints"]
    dist = spec["disturbance"]
    w = BoxSet(dist["per_component_lower"], dist["per_component_upper"])
    model = base.model.replace(
        step_T=float(spec["sampling_period"]),
        X=BoxSet(cons["x_lower"], cons["x_upper"]),
        U=BoxSet(cons["u_lower"], cons["u_upper"]),
        x_s=np.asarray(spec["steady_state"]["x"], dtype=float),
        u_s=np.asarray(spec["steady_state"]["u"], dtype=float),
        delta_bar=delta_bar_from_intervals(w.lower, w.upper),
    )
    if spec.get("lipschitz_override") is not None:
        model = model.replace(L_f=float(spec["lipschitz_override"]))
    from dataclasses import replace

    x0 = spec.get("initial_state")
    return replace(
        base,
        id=spec.get("id", "custom"),
        model=model,
        disturbance_spec=w,
        x0=np.asarray(x0, dtype=float) if x0 is not None else base.x0,
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    model = scenario.model
    return {
        "id": scenario.id,
        "plant": model.name,
        "dimensions": {"n": model.n, "m": model.m},
        "sampling_period": model.step_T,
        "coefficients": {k: v for k, v in scenario.coefficients.items() if k != "variant"},
        "variant": scenario.coefficients.get("variant", "standard"),
        "constraints": {
            "x_lower": model.X.lower.tolist(),
            "x_upper": model.X.upper.tolist(),
            "u_lower": model.U.lower.tolist(),
            "u_upper": model.U.upper.tolist(),
        },
        "steady_state": {"x": model.x_s.tolist(), "u": model.u_s.tolist()},
        "disturbance": {
            "per_component_lower": scenario.disturbance_spec.lower.tolist(),
            "per_component_upper": scenario.disturbance_spec.upper.tolist(),
        },
        "lipschitz_override": model.L_f,
        "initial_state": None if scenario.x0 is None else np.asarray(scenario.x0).tolist(),
    }


def get_scenario(name: str) -> Scenario:
    if name == "cstr":
        return cstr_scenario()
    if name == "four_tank":
        return four_tank_scenario()
    return load_scenario(name)
