"""Command-line entry point: ``atebm <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 a gradient
check failed its tolerance.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .diffcore import (
    ACTIVATIONS,
    CheckpointError,
    NonFiniteError,
    energy_forward,
    finite_diff_gradient,
    grad_input,
    grad_params,
    grad_params_of_input_grad_norm,
    init_model,
    load_checkpoint,
)
from .distributions import derive_rng
from .evaluation import GridSpec, field_plot
from .experiments import (
    RECIPES,
    ConfigError,
    EvalContext,
    ExperimentError,
    ExperimentSpec,
    build_recipe,
    compare_runs,
    load_spec,
    ood_spec_default,
    run_eval_ops,
    run_experiment,
    run_recipe,
    series_table,
    spec_from_tree,
    to_dict,
)
from .objectives import at_grad_closed, at_loss
from .training import RunRecord

OUTPUT_ENV = "ATEBM_OUTPUT_DIR"
EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 2, 3, 4


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


def resolve_config(ref: str, overrides=(), seed: int | None = None) -> ExperimentSpec:
    """Load a spec from a YAML path or ``recipe[/arm]``, then apply overrides and seed.

    A recipe with several arms needs the arm named explicitly.
    """
    if Path(ref).is_file():
        spec = load_spec(ref)
    else:
        name, _, arm = ref.partition("/")
        if name not in RECIPES:
            raise ConfigError(f"{ref!r} is neither a config file nor a recipe")
        specs = build_recipe(name)
        if arm:
            specs = [s for s in specs if s.id == arm]
            if not specs:
                raise ConfigError(f"recipe {name!r} has no arm {arm!r}")
        if len(specs) != 1:
            raise ConfigError(f"recipe {name!r} has arms {[s.id for s in build_recipe(name)]}; "
                              f"pick one as {name}/<arm>")
        spec = specs[0]
    tree = to_dict(spec)
    if seed is not None:
        tree["train"]["seed"] = seed
    return spec_from_tree(tree, overrides)


# ---------------------------------------------------------------- gradcheck

def _rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def gradient_checks(seed: int = 0, instances: int = 10) -> list[tuple[str, float, float]]:
    """Finite-difference suite; returns ``(check, worst relative error, tolerance)`` rows."""
    rng = derive_rng(seed, "gradcheck")
    worst = {"grad_params": 0.0, "grad_input": 0.0, "at_grad_closed": 0.0, "r1_grad": 0.0}
    acts = sorted(ACTIVATIONS)
    for i in range(instances):
        act = acts[i % len(acts)]
        d = int(rng.integers(1, 4))
        sizes = [d, int(rng.integers(2, 7)), int(rng.integers(2, 7)), 1]
        model = init_model(sizes, act, rng)
        x = rng.normal(size=(int(rng.integers(1, 6)), d))
        fake = rng.normal(size=(int(rng.integers(1, 6)), d))
        w = rng.normal(size=x.shape[0])
        theta = model.get_params()

        def weighted(p):
            return float(np.dot(w, energy_forward(model.with_params(p), x)))

        worst["grad_params"] = max(worst["grad_params"], _rel_err(
            grad_params(model, x, w), finite_diff_gradient(weighted, theta)))
        fd_in = np.stack([finite_diff_gradient(lambda z: energy_forward(model, z[None])[0], row)
                          for row in x])
        worst["grad_input"] = max(worst["grad_input"], _rel_err(grad_input(model, x), fd_in))
        worst["at_grad_closed"] = max(worst["at_grad_closed"], _rel_err(
            at_grad_closed(model, x, fake), at_loss(model, x, fake).grad))

        def r1(p):
            return grad_params_of_input_grad_norm(model.with_params(p), x)[0]

        worst["r1_grad"] = max(worst["r1_grad"], _rel_err(
            grad_params_of_input_grad_norm(model, x)[1], finite_diff_gradient(r1, theta)))
    tol = {"grad_params": 1e-5, "grad_input": 1e-5, "at_grad_closed": 1e-10, "r1_grad": 1e-4}
    return [(k, worst[k], tol[k]) for k in worst]


# --------------------------------------------------------------- subcommands

def _add_config_args(p):
    p.add_argument("config", help="YAML spec path or recipe[/arm]")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", default=None,
                   help=f"defaults to ${OUTPUT_ENV} or ./runs")


def _out(args) -> Path:
    return Path(args.output_dir or default_output_dir())


def cmd_train(args) -> int:
    spec = resolve_config(args.config, args.override, args.seed)
    spec = dataclasses.replace(spec, eval=[])
    run_dir = run_experiment(spec, _out(args))
    print(run_dir)
    return 0


def _context(spec, checkpoint, run_dir=None) -> EvalContext:
    model = load_checkpoint(checkpoint, expect_sizes=spec.model.sizes)
    return EvalContext(spec, model, model, RunRecord(), run_dir)


def cmd_eval(args) -> int:
    spec = resolve_config(args.config, args.override, args.seed)
    ops = [op for op in spec.eval if op["op"] not in ("field_plot", "divergence", "particle_mmd")]
    ops = [{k: v for k, v in op.items() if k not in ("every", "threshold")} for op in ops]
    report = run_eval_ops(_context(spec, args.checkpoint), ops)
    print(json.dumps(report, indent=2, sort_keys=True, default=str))
    return 0


def cmd_ood(args) -> int:
    spec = resolve_config(args.config, args.override, args.seed)
    op = next((dict(o) for o in spec.eval if o["op"] == "ood"), None)
    if op is None:
        op = {"op": "ood", "ood": to_dict(ood_spec_default())}
    if args.eps:
        op["eps"] = args.eps
    report = run_eval_ops(_context(spec, args.checkpoint), [op])
    for k in sorted(report):
        print(f"{k}\t{report[k]!r}")
    return 0


def cmd_plot(args) -> int:
    spec = resolve_config(args.config, args.override, args.seed)
    model = load_checkpoint(args.checkpoint, expect_sizes=spec.model.sizes)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    field_plot(model, GridSpec(spec.p_data.domain_bounds, args.resolution), (), path)
    print(path)
    return 0


def cmd_gradcheck(args) -> int:
    failed = False
    for name, err, tol in gradient_checks(args.seed, args.instances):
        ok = err <= tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<16} max_rel_err={err:.3e}  tol={tol:.0e}")
    if failed:
        print("acceptance failure: a gradient check exceeded its tolerance", file=sys.stderr)
        return EXIT_CHECK
    return 0


def cmd_experiment(args) -> int:
    if (args.name is None) == (args.config is None):
        raise ConfigError("give a recipe or spec either positionally or with --config")
    args.name = args.name or args.config
    if args.name in RECIPES and not args.override:
        dirs = run_recipe(args.name, _out(args), args.seed or 0, args.arm or None)
    else:
        spec = resolve_config(args.name, args.override, args.seed)
        dirs = [run_experiment(spec, _out(args))]
    for d in dirs:
        print(d)
    return 0


def cmd_compare(args) -> int:
    if args.series:
        rows = series_table(args.dirs, args.series, args.out)
    else:
        rows = compare_runs(args.dirs, args.out)
    if args.out is not None:
        print(args.out)
    elif rows:
        print("\t".join(rows[0]))
        for r in rows:
            print("\t".join("never" if v is None else repr(float(v)) if isinstance(v, float) else str(v)
                            for v in r.values()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atebm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one spec and write checkpoints and the run record")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run a spec's evaluation ops on a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ood", help="clean and worst-case OOD AUROC of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=float, nargs="+", default=None)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("plot", help="SVG contour and gradient-field plot of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=101)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every derivative")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=12)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run a named recipe or a spec file")
    p.add_argument("name", nargs="?", help=f"recipe ({', '.join(sorted(RECIPES))}) or spec path")
    p.add_argument("--config", default=None, help="same as the positional argument")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--arm", action="append", default=[], help="restrict a recipe to these arms")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", help="tabulate final metrics of several run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--series", default=None, metavar="METRIC",
                   help="align a logged per-iteration metric instead of final metrics")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentError, NonFiniteError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


parse_and_dispatch = main


if __name__ == "__main__":
    sys.exit(main())
