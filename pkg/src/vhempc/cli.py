"""Command line entry point: ``vhempc run | offline | verify-rpi``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    RunConfig,
    default_empc,
    export_csv,
    export_summary_csv,
    monte_carlo,
    offline_ingredients,
    preset_for,
    verify_rpi_sampling,
)
from .model import get_scenario

log = logging.getLogger("vhempc")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="cstr", help="cstr, four_tank or a scenario JSON file")
    p.add_argument("--mu", type=float, default=0.95)
    p.add_argument("--n0", type=int, default=None, help="initial horizon (scenario preset if omitted)")
    p.add_argument("--lam", type=float, default=None, help="terminal weight (scenario preset if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tightening", type=_on_off, default=None, metavar="{on|off}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vhempc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="closed-loop simulation batch")
    _common(run)
    run.add_argument("--pc", type=int, choices=(1, 2, 3, 4), default=1)
    run.add_argument("--steps", type=int, default=30)
    run.add_argument("--runs", type=int, default=1)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--cost", choices=("known", "learned"), default="known")
    run.add_argument("--terminal", choices=("implicit", "explicit"), default="implicit")
    run.add_argument("--window", type=int, nargs=2, default=(0, 20), metavar=("FIRST", "LAST"))
    run.add_argument("--out", type=Path, required=True)

    off = sub.add_parser("offline", help="estimate terminal ingredients and horizon sets")
    _common(off)
    off.add_argument("--out", type=Path, required=True, help="ingredients JSON path")

    rpi = sub.add_parser("verify-rpi", help="sampled estimate of the invariant level")
    _common(rpi)
    rpi.add_argument("--q", type=int, required=True)
    rpi.add_argument("--s", type=int, required=True)
    rpi.add_argument("--out", type=Path, default=None, help="optional JSON result path")
    return parser


def _ingredients(args):
    return offline_ingredients(args.scenario, lam=args.lam, N0=args.n0, mu=args.mu, tightening=args.tightening)


def cmd_run(args) -> int:
    scenario = get_scenario(args.scenario)
    ing = _ingredients(args)
    empc = default_empc(args.scenario, args.pc, mu=args.mu, explicit_terminal=args.terminal == "explicit")
    if args.n0 is not None:
        empc = replace(empc, N0=args.n0)
    config = RunConfig(
        scenario=args.scenario,
        empc=empc,
        steps=args.steps,
        seed=args.seed,
        cost=args.cost,
        tightening=args.tightening,
        lam=args.lam,
    )
    summary, results = monte_carlo(config, args.runs, workers=args.workers, window=tuple(args.window), ingredients=ing)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    n, m = scenario.model.n, scenario.model.m
    for i, res in enumerate(results):
        export_csv(res.trace, out / f"trace_{i:04d}.csv", n, m)
    export_summary_csv(summary, out / "summary.csv")
    meta = {
        "scenario": args.scenario,
        "pc": args.pc,
        "mu": args.mu,
        "N0": empc.N0,
        "steps": args.steps,
        "runs": args.runs,
        "master_seed": args.seed,
        "run_seeds": summary.seeds,
        "cost": args.cost,
        "terminal": args.terminal,
        "tightening": ing.delta_bar > 0,
        "violation_rate": summary.violation_rate,
        "avg_econ_window": summary.avg_econ_window,
        "window": list(summary.window),
        "convergence_radius": summary.convergence_radius,
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2))
    ing.save(out / "ingredients.json")
    print(
        f"runs={summary.runs} violation_rate={summary.violation_rate:.4f} "
        f"avg_econ[{summary.window[0]},{summary.window[1]}]={summary.avg_econ_window:.6f} "
        f"radius={summary.convergence_radius:.5f}"
    )
    return 0


def _preset_n0(scenario_id: str) -> int:
    return preset_for(get_scenario(scenario_id)).N0


def cmd_offline(args) -> int:
    ing = _ingredients(args)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    ing.save(args.out)
    s = ing.sets
    print(f"a_p={s.a_p:.6g} a={s.a:.6g} d={s.d:.6g} admissible horizons={list(ing.horizons.admissible)}")
    return 0


def cmd_verify_rpi(args) -> int:
    n0 = args.n0 if args.n0 is not None else _preset_n0(args.scenario)
    ing = _ingredients(args)
    r_s, contained = verify_rpi_sampling(args.q, args.s, n0, args.scenario, seed=args.seed, ingredients=ing)
    print(f"r_s={r_s:.6g} contained={contained}")
    if args.out is not None:
        args.out.write_text(json.dumps({"q": args.q, "s": args.s, "N0": n0, "r_s": r_s, "contained": contained}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "offline": cmd_offline, "verify-rpi": cmd_verify_rpi}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
