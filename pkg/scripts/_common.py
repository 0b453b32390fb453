"""Shared argument handling for the recipe runners."""
import argparse

from atebm.experiments import compare_runs, run_recipe


def run(recipes, description):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    for name in recipes:
        for seed in args.seeds:
            dirs = run_recipe(name, args.out, seed)
            print(f"{name} seed {seed}:")
            if len(dirs) > 1:
                for row in compare_runs(dirs):
                    print("  " + "  ".join(f"{k}={v}" for k, v in row.items()))
            else:
                print(f"  {dirs[0]}")
