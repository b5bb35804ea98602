"""Four-tank study: horizon schedules PC1..PC4, then the iterative cost-learning protocol."""

import argparse
import json
from pathlib import Path

from vhempc.harness import RunConfig, default_empc, export_csv, learning_protocol, offline_ingredients, simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--skip-learning", action="store_true")
    p.add_argument("--out", type=Path, default=Path("results/four_tank"))
    args = p.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    ing = offline_ingredients("four_tank")
    s = ing.sets
    print(f"a_p={s.a_p:.4g} a={s.a:.4g} d={s.d:.4g} horizons={list(ing.horizons.admissible)}")

    rows = []
    for pc in (1, 2, 3, 4):
        config = RunConfig("four_tank", default_empc("four_tank", pc), steps=args.steps, seed=args.seed)
        res = simulate(config, ingredients=ing)
        export_csv(res.trace, args.out / f"pc{pc}.csv")
        horizons = [r.N_k for r in res.trace]
        econ = sum(r.econ_stage for r in res.trace) / len(res.trace)
        solve = sum(r.solve_ms for r in res.trace) / len(res.trace)
        infeasible = sum(not r.feasible for r in res.trace)
        row = {"pc": pc, "avg_econ": econ, "mean_solve_ms": solve, "N_first": horizons[0],
               "N_last": horizons[-1], "infeasible": infeasible}
        print(json.dumps(row))
        rows.append(row)
    (args.out / "schedules.json").write_text(json.dumps(rows, indent=2))

    if args.skip_learning:
        return
    config = RunConfig("four_tank", default_empc("four_tank", 1), steps=args.steps, seed=args.seed, cost="learned")
    episodes, frozen = learning_protocol(config, args.iterations, ingredients=ing)
    hist = [{"iteration": e.iteration, "test_mse": e.test_mse, "avg_econ": e.avg_econ} for e in episodes]
    for h in hist:
        print(json.dumps(h))
    (args.out / "learning.json").write_text(json.dumps(hist, indent=2))
    frozen.save(args.out / "frozen_regressor.json")


if __name__ == "__main__":
    main()
