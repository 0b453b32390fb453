"""Regenerate configs/*.yaml from the built-in recipes (seed 0)."""
from pathlib import Path

from atebm.experiments import RECIPES, build_recipe, dump_spec

if __name__ == "__main__":
    out = Path(__file__).resolve().parent.parent / "configs"
    out.mkdir(exist_ok=True)
    for name in RECIPES:
        for spec in build_recipe(name, 0):
            dump_spec(spec, out / f"{spec.id}.yaml")
            print(out / f"{spec.id}.yaml")
