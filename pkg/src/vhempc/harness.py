"""Closed-loop simulation, Monte Carlo batches, RPI sampling and CSV export."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .controller import Controller, EmpcConfig, InfeasibleStartError, schedule
from .fheoc import known_cost, solve_auxiliary
from .ingredients import IngredientConfig, Ingredients, build_ingredients
from .model import BoxSet, Scenario, get_scenario, step_disturbed
from .regressor import (
    KernelBasis,
    RegressorModel,
    latin_hypercube_centers,
    mixed_kernels,
    new_regressor,
    Sample,
    stable_rate,
    test_error,
)

logger = logging.getLogger(__name__)

VIOLATION_TOL = 1e-9
MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Seeds and disturbances
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seeds(master: int, count: int) -> list[int]:
    """Independent per-run seeds from one master seed."""
    out, state = [], master & MASK64
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        out.append(splitmix64(state))
    return out


def sample_disturbance(spec: BoxSet, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(spec.lower, spec.upper)


# ---------------------------------------------------------------------------
# Scenario presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    """Offline settings that go with a scenario."""

    Q: tuple
    R: tuple
    lam: float
    N0: int
    N_max: int
    tightening: bool
    relax_initial_contraction: bool = False


PRESETS = {
    "cstr": Preset(Q=((1.0, 0.0), (0.0, 1.0)), R=((0.1,),), lam=40.0, N0=7, N_max=12, tightening=True),
    "four_tank": Preset(
        Q=tuple(tuple(float(i == j) for j in range(4)) for i in range(4)),
        R=((1.0, 0.0), (0.0, 1.0)),
        lam=2.0,
        N0=22,
        N_max=30,
        tightening=False,
        relax_initial_contraction=True,
    ),
}


def preset_for(scenario: Scenario) -> Preset:
    if scenario.model.name in PRESETS:
        return PRESETS[scenario.model.name]
    raise ValueError(f"no preset for plant {scenario.model.name!r}")


@lru_cache(maxsize=16)
def _cached_ingredients(scenario_id: str, lam, N0, N_max, mu, tightening, seed) -> dict:
    scenario = get_scenario(scenario_id)
    pre = preset_for(scenario)
    cfg = IngredientConfig(
        Q=np.array(pre.Q),
        R=np.array(pre.R),
        lam=lam,
        N0=N0,
        N_max=N_max,
        mu=mu,
        tightening=tightening,
        seed=seed,
    )
    return build_ingredients(scenario.model, cfg).to_dict()


def offline_ingredients(
    scenario_id: str,
    lam: Optional[float] = None,
    N0: Optional[int] = None,
    N_max: Optional[int] = None,
    mu: float = 0.95,
    tightening: Optional[bool] = None,
    seed: int = 0,
) -> Ingredients:
    """Ingredients for a named scenario, cached per process."""
    pre = preset_for(get_scenario(scenario_id))
    data = _cached_ingredients(
        scenario_id,
        pre.lam if lam is None else float(lam),
        pre.N0 if N0 is None else int(N0),
        pre.N_max if N_max is None else int(N_max),
        float(mu),
        pre.tightening if tightening is None else bool(tightening),
        int(seed),
    )
    return Ingredients.from_dict(data)


def default_basis(scenario: Scenario, seed: int = 0, S: int = 8) -> KernelBasis:
    model = scenario.model
    lower = np.concatenate([model.X.lower, model.U.lower])
    upper = np.concatenate([model.X.upper, model.U.upper])
    return KernelBasis(latin_hypercube_centers(lower, upper, S, seed), mixed_kernels())


def default_empc(scenario_id: str, pc: int = 1, **changes) -> EmpcConfig:
    """Controller settings with the scenario's initial horizon and start-up policy."""
    pre = preset_for(get_scenario(scenario_id))
    base = EmpcConfig(N0=pre.N0, schedule=schedule(pc), relax_initial_contraction=pre.relax_initial_contraction)
    return replace(base, **changes)


def default_regressor(scenario: Scenario, seed: int = 0) -> RegressorModel:
    """Randomly initialised regressor with a rate scaled to the feature magnitudes."""
    basis = default_basis(scenario, seed)
    model = scenario.model
    lower = np.concatenate([model.X.lower, model.U.lower])
    upper = np.concatenate([model.X.upper, model.U.upper])
    return new_regressor(basis, seed, gamma0=stable_rate(basis, lower, upper, seed=seed))


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "cstr"
    empc: EmpcConfig = field(default_factory=EmpcConfig)
    steps: int = 30
    seed: int = 0
    cost: str = "known"
    tightening: Optional[bool] = None
    lam: Optional[float] = None
    N_max: Optional[int] = None
    ingredient_seed: int = 0
    x0: Optional[tuple] = None
    collect_solver_logs: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cost not in ("known", "learned"):
            raise ValueError("cost must be 'known' or 'learned'")


@dataclass
class TraceRecord:
    k: int
    x: np.ndarray
    u: np.ndarray
    delta: np.ndarray
    N_k: int
    case: str
    mode: str
    bound: float
    V_e: float
    V_a_e: float
    econ_stage: float
    solve_ms: float
    violation: bool
    feasible: bool = True
    candidate_margin: float = np.nan
    anomaly: bool = False
    projection_fallback: bool = False
    relaxed_start: bool = False


@dataclass
class RunResult:
    trace: list
    seed: int
    status: str
    final_state: np.ndarray
    regressor: Optional[RegressorModel] = None
    observations: list = field(default_factory=list)
    updates: int = 0

    @property
    def violated(self) -> bool:
        return any(r.violation for r in self.trace)


def state_violation(X: BoxSet, x) -> bool:
    return X.violation(x) > VIOLATION_TOL


def simulate(
    config: RunConfig,
    ingredients: Optional[Ingredients] = None,
    regressor: Optional[RegressorModel] = None,
    scenario: Optional[Scenario] = None,
    update_offset: int = 0,
) -> RunResult:
    """Closed loop: control step, disturbed plant step, cost observation, advance.

    ``trace[k].x`` is the state measured at time k and ``trace[k].u`` the input
    applied there; the violation flag refers to ``x``.
    """
    scenario = scenario or get_scenario(config.scenario)
    pre = preset_for(scenario)
    tightening = pre.tightening if config.tightening is None else config.tightening
    if ingredients is None:
        ingredients = offline_ingredients(
            config.scenario,
            lam=config.lam,
            N0=config.empc.N0,
            N_max=config.N_max,
            mu=config.empc.mu,
            tightening=tightening,
            seed=config.ingredient_seed,
        )
    model = scenario.model
    if config.cost == "learned":
        if regressor is None:
            regressor = default_regressor(scenario, config.ingredient_seed)
        ctrl = Controller(model, ingredients, config.empc, regressor=regressor, update_offset=update_offset)
    else:
        ctrl = Controller(model, ingredients, config.empc, cost=known_cost(scenario))
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng(splitmix64(config.seed ^ 0x5EED))
    x = np.asarray(config.x0 if config.x0 is not None else scenario.x0, dtype=float)
    state = ctrl.initial_state()
    trace, observations = [], []
    status = "ok"
    for k in range(config.steps):
        try:
            u, state = ctrl.control_step(state, x)
        except InfeasibleStartError as exc:
            logger.warning("run aborted at k=%d: %s", k, exc)
            status = "infeasible_start"
            break
        rec = state.records[-1]
        delta = sample_disturbance(scenario.disturbance_spec, rng)
        x_next = step_disturbed(model, x, u, delta)
        truth = scenario.economic_cost_truth(x, u, 0.0)
        noise = 0.0
        if scenario.noise_spec is not None:
            noise = float(noise_rng.uniform(*scenario.noise_spec))
        y = scenario.economic_cost_truth(x, u, noise)
        observations.append((np.concatenate([x, u]), y))
        trace.append(
            TraceRecord(
                k=k,
                x=x.copy(),
                u=np.asarray(u, dtype=float).copy(),
                delta=delta,
                N_k=rec.N,
                case=rec.case,
                mode=rec.mode,
                bound=rec.bound,
                V_e=rec.V_e,
                V_a_e=rec.V_a_e,
                econ_stage=truth,
                solve_ms=1e3 * rec.solve_time,
                violation=state_violation(model.X, x),
                feasible=rec.feasible,
                anomaly=rec.anomaly,
                relaxed_start=rec.relaxed_start,
            )
        )
        state = ctrl.advance(state, x_next, y if config.cost == "learned" else None)
        trace[-1].candidate_margin = rec.candidate_margin
        trace[-1].projection_fallback = rec.projection_fallback
        x = x_next
    return RunResult(trace, config.seed, status, x, state.regressor, observations, state.update_count)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class McSummary:
    runs: int
    violation_rate: float
    avg_econ_window: float
    act_per_step: list
    convergence_radius: float
    per_run: list = field(default_factory=list)
    window: tuple = (0, 20)
    seeds: list = field(default_factory=list)


def _run_one(args):
    config, ingredients_dict = args
    ing = Ingredients.from_dict(ingredients_dict) if ingredients_dict is not None else None
    return simulate(config, ing)


def run_batch(config: RunConfig, n_runs: int, workers: int = 1, ingredients: Optional[Ingredients] = None) -> list:
    """Simulate ``n_runs`` runs with seeds derived from ``config.seed``; results in seed order."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seeds = derive_seeds(config.seed, n_runs)
    ing_dict = ingredients.to_dict() if ingredients is not None else None
    jobs = [(replace(config, seed=s), ing_dict) for s in seeds]
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def summarize(results: list, window: tuple = (0, 20)) -> McSummary:
    lo, hi = window
    per_run = []
    for r in results:
        econ = [t.econ_stage for t in r.trace if lo <= t.k <= hi]
        per_run.append(
            {
                "seed": r.seed,
                "status": r.status,
                "violated": r.violated,
                "avg_econ": float(np.mean(econ)) if econ else float("nan"),
                "final_radius": float("nan"),
                "mean_solve_ms": float(np.mean([t.solve_ms for t in r.trace])) if r.trace else float("nan"),
            }
        )
    steps = max((len(r.trace) for r in results), default=0)
    act = []
    for k in range(steps):
        vals = [r.trace[k].solve_ms for r in results if len(r.trace) > k]
        act.append(float(np.mean(vals)))
    return McSummary(
        runs=len(results),
        violation_rate=float(np.mean([r.violated for r in results])),
        avg_econ_window=float(np.mean([p["avg_econ"] for p in per_run])),
        act_per_step=act,
        convergence_radius=float("nan"),
        per_run=per_run,
        window=window,
        seeds=[r.seed for r in results],
    )


def monte_carlo(
    config: RunConfig,
    n_runs: int,
    workers: int = 1,
    window: tuple = (0, 20),
    ingredients: Optional[Ingredients] = None,
) -> tuple[McSummary, list]:
    results = run_batch(config, n_runs, workers, ingredients)
    summary = summarize(results, window)
    scenario = get_scenario(config.scenario)
    radii = [float(np.linalg.norm(r.final_state - scenario.model.x_s)) for r in results]
    for p, rad in zip(summary.per_run, radii):
        p["final_radius"] = rad
    summary.convergence_radius = max(radii)
    return summary, results


# ---------------------------------------------------------------------------
# Repeated-episode learning
# ---------------------------------------------------------------------------


@dataclass
class EpisodeSummary:
    iteration: int
    test_mse: float
    avg_econ: float
    result: RunResult


def cost_test_set(scenario: Scenario, count: int, seed: int) -> list:
    """Noisy cost observations on a Latin-hypercube sample of X x U."""
    model = scenario.model
    lower = np.concatenate([model.X.lower, model.U.lower])
    upper = np.concatenate([model.X.upper, model.U.upper])
    W = latin_hypercube_centers(lower, upper, count, seed)
    rng = np.random.default_rng(seed)
    out = []
    for w in W:
        noise = float(rng.uniform(*scenario.noise_spec)) if scenario.noise_spec is not None else 0.0
        out.append(Sample(w, scenario.economic_cost_truth(w[: model.n], w[model.n :], noise)))
    return out


def learning_protocol(
    config: RunConfig,
    iterations: int = 5,
    test_count: int = 200,
    ingredients: Optional[Ingredients] = None,
    regressor: Optional[RegressorModel] = None,
) -> tuple[list, RegressorModel]:
    """Repeat the closed loop from the same start, carrying the learned weights over.

    Each episode uses its own disturbance seed. After the last episode the
    weights are frozen. Returns per-episode summaries and the frozen model.
    """
    if config.cost != "learned":
        config = replace(config, cost="learned")
    scenario = get_scenario(config.scenario)
    reg = regressor or default_regressor(scenario, config.ingredient_seed)
    test = cost_test_set(scenario, test_count, splitmix64(config.seed ^ 0x7E57))
    episodes = []
    updates = 0
    for it, seed in enumerate(derive_seeds(config.seed, iterations), start=1):
        res = simulate(replace(config, seed=seed), ingredients, regressor=reg, scenario=scenario, update_offset=updates)
        reg, updates = res.regressor, res.updates
        econ = [t.econ_stage for t in res.trace]
        episodes.append(EpisodeSummary(it, test_error(reg, test), float(np.mean(econ)), res))
        logger.info("episode %d: test mse %.4g, mean economic cost %.4g", it, episodes[-1].test_mse, episodes[-1].avg_econ)
    return episodes, reg.freeze()


# ---------------------------------------------------------------------------
# RPI sampling
# ---------------------------------------------------------------------------


def verify_rpi_sampling(
    q: int,
    s: int,
    N0: int,
    scenario_id: str = "cstr",
    empc: Optional[EmpcConfig] = None,
    seed: int = 0,
    ingredients: Optional[Ingredients] = None,
    containment_samples: int = 200,
    max_draws: Optional[int] = None,
) -> tuple[float, bool]:
    """Estimate the level reached after ``s`` closed-loop steps from ``q`` feasible starts.

    Initial points are drawn uniformly in X and kept when the start-up problem
    is feasible at horizon ``N0``. Returns the largest auxiliary value after
    ``s`` steps and whether sampled points of that sub-level set were all
    feasible starts too.
    """
    if q < 1 or s < 1:
        raise ValueError("q and s must be >= 1")
    scenario = get_scenario(scenario_id)
    model = scenario.model
    ing = ingredients or offline_ingredients(scenario_id, N0=N0)
    base = empc or EmpcConfig(N0=N0, schedule=schedule(1))
    cfg = replace(base, N0=N0, schedule=schedule(1))
    rng = np.random.default_rng(seed)
    starts = []
    draws = 0
    max_draws = max_draws or 50 * q
    while len(starts) < q and draws < max_draws:
        draws += 1
        x = model.X.sample(rng, 1)[0]
        _, value, ok = solve_auxiliary(model, ing, x, N0, max_iter=60)
        if ok and value <= ing.contraction_budget(N0):
            starts.append(x)
    if not starts:
        raise ValueError("no feasible initial state found by rejection sampling")
    r_s = 0.0
    for i, x0 in enumerate(starts):
        run = RunConfig(scenario=scenario_id, empc=cfg, steps=s + 1, seed=splitmix64(seed + i), x0=tuple(x0))
        res = simulate(run, ing, scenario=scenario)
        r_s = max(r_s, res.trace[-1].V_a_e if len(res.trace) > s else np.inf)
    # sampled containment of the sub-level set in the feasible-start region
    contained = True
    pts = model.X.sample(rng, containment_samples)
    for x in pts:
        U, value, ok = solve_auxiliary(model, ing, x, N0, max_iter=60)
        if ok and value <= r_s and value > ing.contraction_budget(N0):
            contained = False
            break
    return float(r_s), contained


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def trace_columns(n: int, m: int) -> list[str]:
    return (
        ["k"]
        + [f"x_{i}" for i in range(n)]
        + [f"u_{i}" for i in range(m)]
        + [f"delta_{i}" for i in range(n)]
        + ["N_k", "case", "mode", "bound", "V_e", "V_a_e", "econ_stage", "solve_ms", "violation"]
    )


def _fmt(v) -> str:
    return repr(float(v))


def export_csv(trace: list, path, n: Optional[int] = None, m: Optional[int] = None) -> None:
    """Write a trace with one row per step; floats in shortest round-trip form."""
    if trace:
        n = trace[0].x.size
        m = trace[0].u.size
    if n is None or m is None:
        raise ValueError("dimensions are required for an empty trace")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(n, m))
        for r in trace:
            w.writerow(
                [r.k]
                + [_fmt(v) for v in r.x]
                + [_fmt(v) for v in r.u]
                + [_fmt(v) for v in r.delta]
                + [r.N_k, r.case, r.mode, _fmt(r.bound), _fmt(r.V_e), _fmt(r.V_a_e), _fmt(r.econ_stage)]
                + [_fmt(r.solve_ms), int(bool(r.violation))]
            )


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("x_"))
    m = sum(1 for h in header if h.startswith("u_"))
    out = []
    for row in body:
        i = 1
        x = np.array([float(v) for v in row[i : i + n]])
        i += n
        u = np.array([float(v) for v in row[i : i + m]])
        i += m
        delta = np.array([float(v) for v in row[i : i + n]])
        i += n
        out.append(
            TraceRecord(
                k=int(row[0]),
                x=x,
                u=u,
                delta=delta,
                N_k=int(row[i]),
                case=row[i + 1],
                mode=row[i + 2],
                bound=float(row[i + 3]),
                V_e=float(row[i + 4]),
                V_a_e=float(row[i + 5]),
                econ_stage=float(row[i + 6]),
                solve_ms=float(row[i + 7]),
                violation=bool(int(row[i + 8])),
            )
        )
    return out


SUMMARY_COLUMNS = ["run", "seed", "status", "violated", "avg_econ", "final_radius", "mean_solve_ms"]


def export_summary_csv(summary: McSummary, path) -> None:
    """One row per run plus an ``aggregate`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for i, p in enumerate(summary.per_run):
            w.writerow(
                [i, p["seed"], p["status"], int(p["violated"]), _fmt(p["avg_econ"]), _fmt(p["final_radius"])]
                + [_fmt(p["mean_solve_ms"])]
            )
        w.writerow(
            [
                "aggregate",
                "",
                f"runs={summary.runs}",
                _fmt(summary.violation_rate),
                _fmt(summary.avg_econ_window),
                _fmt(summary.convergence_radius),
                _fmt(float(np.mean(summary.act_per_step)) if summary.act_per_step else float("nan")),
            ]
        )
