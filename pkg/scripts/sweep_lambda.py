"""Terminal-weight sweep: how the terminal levels and the admissible horizon set move with lambda."""

import argparse

from vhempc.harness import offline_ingredients, preset_for
from vhempc.model import get_scenario


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario", default="cstr")
    p.add_argument("--lams", type=float, nargs="+", default=[1, 2, 5, 10, 20, 40, 80])
    args = p.parse_args()
    n0 = preset_for(get_scenario(args.scenario)).N0
    print("lam       a_p        a          d          xi_N0      admissible")
    for lam in args.lams:
        ing = offline_ingredients(args.scenario, lam=lam)
        s = ing.sets
        print(f"{lam:<9g} {s.a_p:<10.4g} {s.a:<10.4g} {s.d:<10.4g} "
              f"{ing.xi(n0):<10.4g} {list(ing.horizons.admissible)}")


if __name__ == "__main__":
    main()
