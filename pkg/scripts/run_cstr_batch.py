"""Monte Carlo batch on the CSTR: implicit vs explicit terminal handling, with and without tightening."""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from vhempc.harness import RunConfig, default_empc, monte_carlo, offline_ingredients


def batch(explicit: bool, tightening: bool, runs: int, steps: int, seed: int, workers: int):
    ing = offline_ingredients("cstr", tightening=tightening)
    empc = replace(default_empc("cstr", 1), explicit_terminal=explicit)
    config = RunConfig("cstr", empc, steps=steps, seed=seed, tightening=tightening)
    t0 = time.perf_counter()
    summary, results = monte_carlo(config, runs, workers=workers, ingredients=ing)
    wall = time.perf_counter() - t0
    solve = [r.solve_ms for res in results for r in res.trace]
    return {
        "terminal": "explicit" if explicit else "implicit",
        "tightening": tightening,
        "violation_rate": summary.violation_rate,
        "avg_econ_window": summary.avg_econ_window,
        "convergence_radius": summary.convergence_radius,
        "mean_solve_ms": sum(solve) / len(solve),
        "wall_s": wall,
    }


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("results/cstr_batch.json"))
    args = p.parse_args()

    rows = []
    for explicit, tightening in ((False, True), (True, True), (False, False)):
        row = batch(explicit, tightening, args.runs, args.steps, args.seed, args.workers)
        print(json.dumps(row))
        rows.append(row)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
