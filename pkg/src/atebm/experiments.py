"""Experiment specs, canned recipes, run directories and run comparison.

A run directory holds everything one ``ExperimentSpec`` produces::

    config.yaml        resolved spec
    record.tsv         per-iteration RunRecord
    evals.tsv          monitor metrics logged during training
    model_init.ckpt    checkpoint before training
    model_final.ckpt   checkpoint after training
    report.json        final evaluation metrics
    field_*.svg        plots (when a field_plot op is configured)
    manifest.json      status plus sha256 of every artifact above
    timing.json        wall-clock numbers, kept out of the hashed set
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml
from scipy.special import expit

from .diffcore import EnergyModel, energy_forward, init_model, load_checkpoint, save_checkpoint
from .distributions import DistributionSpec, corner_box, derive_rng, gaussian, sample, uniform_box
from .evaluation import (
    GridSpec,
    adversarial_ood_auroc,
    divergence_monitor,
    field_plot,
    local_maxima_census,
    mmd2,
    mmd_null_quantile,
    ood_auroc,
    support_probe,
)
from .samplers import AttackConfig, pgd_ascend, pgd_generate
from .training import (
    MinimaxConfig,
    RunRecord,
    TrainConfig,
    train_binary_at,
    train_ebm_mle_with_pgd,
    train_minimax_particles,
    train_progressive,
)

TRAINERS = ("binary_at", "progressive", "ebm_mle", "minimax")
MISSING = "MISSING"
DEFAULT_OUTPUTS = ["config.yaml", "record.tsv", "model_init.ckpt", "model_final.ckpt",
                   "report.json"]


class ConfigError(ValueError):
    """Malformed config, unknown key or override type mismatch."""


class ExperimentError(RuntimeError):
    """A run failed or did not produce its full artifact list."""


@dataclass
class ModelConfig:
    sizes: list[int] = field(default_factory=lambda: [2, 64, 64, 1])
    activation: str = "softplus"


@dataclass
class ExperimentSpec:
    id: str
    p_data: DistributionSpec
    p0: DistributionSpec
    train: TrainConfig
    eval: list[dict[str, Any]] = field(default_factory=list)
    outputs: list[str] = field(default_factory=lambda: list(DEFAULT_OUTPUTS))
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: str = "progressive"
    minimax: MinimaxConfig | None = None

    def __post_init__(self):
        if not self.id or "/" in self.id:
            raise ConfigError(f"bad experiment id {self.id!r}")
        if self.trainer not in TRAINERS:
            raise ConfigError(f"trainer must be one of {TRAINERS}")
        if self.trainer == "minimax" and self.minimax is None:
            self.minimax = MinimaxConfig()
        for op in self.eval:
            if op.get("op") not in EVAL_OPS:
                raise ConfigError(f"unknown eval op {op.get('op')!r}")
            if op.get("every") and op["op"] not in MONITOR_OPS:
                raise ConfigError(f"eval op {op['op']!r} cannot run as a monitor")


# ---------------------------------------------------------------- config I/O

def to_dict(obj) -> Any:
    """Plain nested dict/list form of a (dataclass) config, safe for YAML."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys and type mismatches raise."""
    return _coerce(cls, data, path or cls.__name__)


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: bad value {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
        kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{path}.{i}") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a {len(args)}-element list")
        return tuple(_coerce(a, v, f"{path}.{i}") for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict or tp is Any:
        return copy.deepcopy(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def apply_overrides(tree: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict; values are parsed as YAML.

    Every key on the path must already exist, so typos fail loudly.  Type
    checking happens when the tree is turned back into a spec.
    """
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        value = _parse_value(raw, item)
        node = tree
        parts = key.split(".")
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise ConfigError(f"override {key!r}: no list index {part!r}")
                idx: Any = int(part)
            elif isinstance(node, dict):
                if part not in node:
                    raise ConfigError(f"override {key!r}: unknown key {part!r}")
                idx = part
            else:
                raise ConfigError(f"override {key!r}: {'.'.join(parts[:i])} is not a mapping")
            if last:
                node[idx] = value
            else:
                node = node[idx]
    return tree


def _parse_value(raw: str, item: str):
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from exc
    if isinstance(value, str):
        # YAML 1.1 reads "1e-4" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return value


def load_spec(path, overrides=()) -> ExperimentSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            tree = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return spec_from_tree(tree, overrides)


def spec_from_tree(tree: dict, overrides=()) -> ExperimentSpec:
    return from_dict(ExperimentSpec, apply_overrides(tree, overrides))


def dump_spec(spec: ExperimentSpec, path=None) -> str:
    text = yaml.safe_dump(to_dict(spec), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ------------------------------------------------------------------ eval ops

@dataclass
class EvalContext:
    spec: ExperimentSpec
    init_model: EnergyModel
    model: EnergyModel
    record: RunRecord
    run_dir: Path | None
    particles: np.ndarray | None = None


def _grid(spec: ExperimentSpec, resolution: int) -> GridSpec:
    return GridSpec(spec.p_data.domain_bounds, resolution)


def final_attack(spec: ExperimentSpec) -> AttackConfig:
    """The attack used in the last training segment."""
    a = spec.train.attack
    return AttackConfig(step_size=a.step_size, steps=spec.train.schedule[-1][0],
                        ball_radius=a.ball_radius, zero_grad_tol=a.zero_grad_tol)


def mmd_probe(spec: ExperimentSpec, n: int = 512, freeze_d: float | None = None,
              bandwidths=(0.25, 0.5, 1.0, 2.0), source: str = "p0",
              freeze_quantile: float | None = 0.5):
    """Callable ``model -> MMD^2`` between generated samples and held-out data.

    Samples start from a fixed draw of ``p0`` (or the uniform domain box) and
    are moved with the final training attack via ``pgd_generate``.  A point
    stops once ``D`` reaches the freeze level: ``freeze_d`` when given,
    otherwise the ``freeze_quantile`` quantile of ``D`` over a fixed held-out
    data sample, i.e. "as real-looking as a typical data point".  Start
    points, reference and calibration samples are drawn once, so successive
    calls only differ through the model.
    """
    if freeze_d is not None and freeze_quantile is not None:
        raise ConfigError("give freeze_d or freeze_quantile, not both")
    if freeze_quantile is not None and not 0.0 < freeze_quantile < 1.0:
        raise ConfigError("freeze_quantile must lie in (0, 1)")
    seed = spec.train.seed
    if source == "p0":
        src_spec = spec.p0
    elif source == "uniform":
        b = spec.p_data.bounds
        src_spec = uniform_box(b[:, 0], b[:, 1])
    else:
        raise ConfigError(f"mmd source must be 'p0' or 'uniform', got {source!r}")
    start = sample(src_spec, n, derive_rng(seed, "mmd-source"), source_tag="p0").points
    ref = sample(spec.p_data, n, derive_rng(seed, "mmd-reference")).points
    calib = sample(spec.p_data, n, derive_rng(seed, "mmd-calibration")).points
    attack = final_attack(spec)
    bw = tuple(bandwidths)

    def probe(model: EnergyModel) -> float:
        level = freeze_d
        if freeze_quantile is not None:
            d_real = expit(energy_forward(model, calib))
            level = float(np.clip(np.quantile(d_real, freeze_quantile), 1e-12, 1.0 - 1e-12))
        gen = pgd_generate(model, start, attack, freeze_d=level).points
        return mmd2(gen, ref, bw)

    return probe


def _op_mmd(ctx: EvalContext, n=512, freeze_d=None, bandwidths=(0.25, 0.5, 1.0, 2.0),
            source="p0", every=0, threshold=None, freeze_quantile=0.5):
    probe = mmd_probe(ctx.spec, n, freeze_d, bandwidths, source, freeze_quantile)
    out = {"mmd": probe(ctx.model)}
    if threshold is not None:
        out["iters_to_threshold"] = iterations_to_threshold(ctx.record.evals, "mmd", threshold)
    return out


def iterations_to_threshold(evals, metric: str, threshold: float):
    """First logged iteration whose ``metric`` is at or below ``threshold``; None if never."""
    for row in evals:
        v = row.get(metric)
        if v is not None and np.isfinite(v) and v <= threshold:
            return int(row["iteration"])
    return None


def _op_support_probe(ctx: EvalContext, resolution=201, mass_level=0.95):
    return support_probe(ctx.model, ctx.spec.p_data, _grid(ctx.spec, resolution), mass_level)


def _op_maxima_census(ctx: EvalContext, resolution=201, margin=1e-6, mass_level=0.95):
    c = local_maxima_census(ctx.model, _grid(ctx.spec, resolution), margin=margin,
                            support=ctx.spec.p_data, mass_level=mass_level)
    return {"offsupport_maxima": c.count}


def _op_divergence(ctx: EvalContext, threshold=1e6):
    d = divergence_monitor(ctx.record, threshold)
    return {"diverged": d["diverged"], "diverged_at": d["iteration"]}


def _op_particle_mmd(ctx: EvalContext, bandwidths=(0.25, 0.5, 1.0, 2.0), null_reps=200,
                     quantile=0.99):
    if ctx.particles is None:
        raise ConfigError("particle_mmd needs the minimax trainer")
    n = ctx.particles.shape[0]
    bw = tuple(bandwidths)
    ref = sample(ctx.spec.p_data, n, derive_rng(ctx.spec.train.seed, "mmd-reference")).points
    pd = ctx.spec.p_data
    null = mmd_null_quantile(lambda r: (sample(pd, n, r).points, sample(pd, n, r).points),
                             derive_rng(ctx.spec.train.seed, "mmd-null"), null_reps, quantile, bw)
    return {"particle_mmd": mmd2(ctx.particles, ref, bw), "null_quantile": null}


def _op_ood(ctx: EvalContext, ood=None, n=200, eps=(0.25, 100.0), steps=100, restarts=5,
            step_fraction=0.1, max_step=0.1):
    if ood is None:
        raise ConfigError("ood op needs an 'ood' distribution")
    ood_spec = ood if isinstance(ood, DistributionSpec) else from_dict(DistributionSpec, ood, "ood")
    rng = derive_rng(ctx.spec.train.seed, "ood-eval")
    xin = sample(ctx.spec.p_data, n, rng).points
    xout = sample(ood_spec, n, rng).points
    out = {"clean_auroc": ood_auroc(ctx.model, xin, xout)}
    for e in eps:
        attack = AttackConfig(step_size=min(max_step, step_fraction * e), steps=steps,
                              ball_radius=float(e))
        rep = adversarial_ood_auroc(ctx.model, xin, xout, attack, restarts=restarts, rng=rng)
        out[f"adv_auroc_eps{e:g}"] = rep.adversarial_auroc
    return out


def _op_field_plot(ctx: EvalContext, resolution=101, arrow_every=10, overlay_n=200):
    if ctx.run_dir is None:
        return {}
    spec = ctx.spec
    grid = _grid(spec, resolution)
    rng = derive_rng(spec.train.seed, "plot-overlays")
    data = sample(spec.p_data, overlay_n, rng).points
    start = sample(spec.p0, overlay_n, rng, source_tag="p0").points
    moved = pgd_ascend(ctx.model, start, final_attack(spec))[0].points
    field_plot(ctx.init_model, grid, [data, start], ctx.run_dir / "field_init.svg",
               arrow_every=arrow_every)
    field_plot(ctx.model, grid, [data, moved], ctx.run_dir / "field_final.svg",
               arrow_every=arrow_every)
    return {}


EVAL_OPS: dict[str, Callable[..., dict]] = {
    "mmd": _op_mmd,
    "support_probe": _op_support_probe,
    "maxima_census": _op_maxima_census,
    "divergence": _op_divergence,
    "particle_mmd": _op_particle_mmd,
    "ood": _op_ood,
    "field_plot": _op_field_plot,
}
MONITOR_OPS = ("mmd",)
OP_OUTPUTS = {"field_plot": ["field_init.svg", "field_final.svg"]}


def run_eval_ops(ctx: EvalContext, ops) -> dict:
    report: dict[str, Any] = {}
    for op in ops:
        params = {k: v for k, v in op.items() if k != "op"}
        try:
            report.update(EVAL_OPS[op["op"]](ctx, **params))
        except TypeError as exc:
            raise ConfigError(f"eval op {op['op']!r}: {exc}") from exc
    return report


# -------------------------------------------------------------------- runner

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_ready(v):
    if isinstance(v, dict):
        return {k: _json_ready(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_ready(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_ready(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def expected_outputs(spec: ExperimentSpec) -> list[str]:
    out = list(spec.outputs)
    if any(op.get("every") for op in spec.eval) and "evals.tsv" not in out:
        out.append("evals.tsv")
    if spec.trainer == "minimax" and "particles.tsv" not in out:
        out.append("particles.tsv")
    for op in spec.eval:
        for name in OP_OUTPUTS.get(op["op"], ()):
            if name not in out:
                out.append(name)
    return out


def train_spec(spec: ExperimentSpec, model: EnergyModel | None = None):
    """Train according to ``spec``; returns ``(init_model, model, record, particles)``."""
    if model is None:
        model = init_model(spec.model.sizes, spec.model.activation,
                           derive_rng(spec.train.seed, "init"))
    monitors = [op for op in spec.eval if op.get("every")]
    every = min(int(op["every"]) for op in monitors) if monitors else 0
    probes = {}
    for op in monitors:
        params = {k: v for k, v in op.items() if k not in ("op", "every", "threshold")}
        probes[op["op"]] = mmd_probe(spec, **params)

    def monitor(it, m, particles=None):
        return {name: p(m) for name, p in probes.items()}

    mon = monitor if probes else None
    particles = None
    if spec.trainer == "binary_at":
        trained, rec = train_binary_at(model, spec.p_data, spec.p0, spec.train, mon, every)
    elif spec.trainer == "progressive":
        trained, rec = train_progressive(model, spec.p_data, spec.p0, spec.train, mon, every)
    elif spec.trainer == "ebm_mle":
        trained, rec = train_ebm_mle_with_pgd(model, spec.p_data, spec.p0, spec.train, mon, every)
    else:
        trained, batch, rec = train_minimax_particles(model, spec.p_data, spec.p0, spec.train,
                                                      spec.minimax, mon, every)
        particles = batch.points
    return model, trained, rec, particles


def run_experiment(spec: ExperimentSpec, out_dir) -> Path:
    """Train, evaluate and write the run directory ``out_dir/spec.id``.

    Re-running with the same spec rewrites byte-identical artifacts (timing
    aside).  On any failure the manifest is written with ``status: failed``
    and the error is re-raised as ``ExperimentError``.
    """
    run_dir = Path(out_dir) / spec.id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    t0 = time.perf_counter()
    try:
        dump_spec(spec, run_dir / "config.yaml")
        init, model, rec, particles = train_spec(spec)
        save_checkpoint(init, run_dir / "model_init.ckpt")
        save_checkpoint(model, run_dir / "model_final.ckpt")
        rec.write(run_dir / "record.tsv")
        if rec.evals:
            rec.write_evals(run_dir / "evals.tsv")
        if particles is not None:
            np.savetxt(run_dir / "particles.tsv", particles, delimiter="\t", fmt="%.17g")
        ctx = EvalContext(spec, init, model, rec, run_dir, particles)
        report = run_eval_ops(ctx, spec.eval)
        report["iterations"] = len(rec.rows)
        _write_json(run_dir / "report.json", report)
    except Exception as exc:
        _write_json(manifest_path, {"id": spec.id, "status": "failed",
                                    "error": f"{type(exc).__name__}: {exc}"})
        raise ExperimentError(f"run {spec.id!r} failed: {exc}") from exc
    wanted = expected_outputs(spec)
    missing = [name for name in wanted if not (run_dir / name).exists()]
    artifacts = {name: _sha256(run_dir / name) for name in wanted if name not in missing}
    status = "failed" if missing else "complete"
    _write_json(manifest_path, {"id": spec.id, "status": status, "artifacts": artifacts,
                                "missing": missing})
    _write_json(run_dir / "timing.json", {"wall_seconds": time.perf_counter() - t0,
                                          "train_seconds": float(np.sum(rec.wall_time))})
    if missing:
        raise ExperimentError(f"run {spec.id!r} is missing {', '.join(missing)}")
    return run_dir


def read_report(run_dir) -> dict:
    return json.loads((Path(run_dir) / "report.json").read_text(encoding="utf-8"))


# --------------------------------------------------------------- comparison

def compare_runs(dirs, path=None) -> list[dict]:
    """Aligned table of final metrics, one row per run directory.

    Columns are the union of metric names; a metric absent from a run shows
    the ``MISSING`` marker.  Runs with no metric in common are rejected.
    """
    dirs = [Path(d) for d in dirs]
    if len(dirs) < 2:
        raise ValueError("compare_runs needs at least two run directories")
    reports = []
    for d in dirs:
        if not (d / "report.json").exists():
            raise ValueError(f"{d} has no report.json")
        reports.append(read_report(d))
    common = set.intersection(*(set(r) - {"iterations"} for r in reports))
    if not common:
        raise ValueError("runs share no metrics")
    columns = sorted(set().union(*reports))
    rows = []
    for d, rep in zip(dirs, reports):
        row = {"run": d.name}
        for c in columns:
            row[c] = rep.get(c, MISSING)
        rows.append(row)
    if path is not None:
        write_table(path, ["run", *columns], rows)
    return rows


def series_table(dirs, metric: str = "mmd", path=None) -> list[dict]:
    """Per-iteration ``metric`` of several runs side by side (MISSING where not logged)."""
    dirs = [Path(d) for d in dirs]
    series = {}
    for d in dirs:
        evals = RunRecord.read(d / "record.tsv", d / "evals.tsv").evals
        series[d.name] = {int(r["iteration"]): r.get(metric) for r in evals}
    its = sorted(set().union(*(s.keys() for s in series.values())))
    rows = [{"iteration": it, **{name: s.get(it, MISSING) for name, s in series.items()}}
            for it in its]
    if path is not None:
        write_table(path, ["iteration", *series], rows)
    return rows


def _cell(v) -> str:
    if v is None:
        return "never"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, columns, rows) -> None:
    lines = ["\t".join(columns)]
    lines += ["\t".join(_cell(r.get(c, MISSING)) for c in columns) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------- recipes

DATA_STD = 1.0
FULL_BOX = ((-4.0, -4.0), (4.0, 4.0))
HALF_BOX = ((-4.0, -4.0), (0.0, 0.0))
CORNER_BOX = ((-4.0, -4.0), (-3.0, -3.0))
PROGRESSIVE_THRESHOLD = 0.2


def _p_data():
    return gaussian((0.0, 0.0), DATA_STD)


def _fig2(seed: int, p0: DistributionSpec, name: str) -> ExperimentSpec:
    return ExperimentSpec(
        id=name, p_data=_p_data(), p0=p0,
        train=TrainConfig(schedule=[(20, 2000)], attack=AttackConfig(step_size=0.3), seed=seed),
        eval=[{"op": "support_probe", "resolution": 201},
              {"op": "maxima_census", "resolution": 201},
              {"op": "field_plot", "resolution": 101}],
    )


def _fig2_pair(seed):
    return [_fig2(seed, uniform_box(*FULL_BOX), "fig2_uniform"),
            _fig2(seed, corner_box(*CORNER_BOX), "fig2_corner")]


def _mmd_arm(seed, name, p0, schedule, every=100, threshold=None):
    op = {"op": "mmd", "n": 512, "freeze_quantile": 0.5, "every": every}
    if threshold is not None:
        op["threshold"] = threshold
    return ExperimentSpec(
        id=name, p_data=_p_data(), p0=p0,
        train=TrainConfig(schedule=schedule, attack=AttackConfig(step_size=0.3), seed=seed),
        eval=[op, {"op": "maxima_census", "resolution": 201}],
    )


def _p0_ablation(seed):
    return [_mmd_arm(seed, "p0_full", uniform_box(*FULL_BOX), [(20, 1500)]),
            _mmd_arm(seed, "p0_half", uniform_box(*HALF_BOX), [(20, 1500)]),
            _mmd_arm(seed, "p0_corner", corner_box(*CORNER_BOX), [(20, 1500)])]


def _k_ablation(seed):
    return [_mmd_arm(seed, f"k{k}", uniform_box(*FULL_BOX), [(k, 1500)]) for k in (1, 5, 15, 25)]


def _progressive_vs_fixed(seed):
    prog = [(1, 100), (5, 100), (15, 200), (25, 600)]
    return [_mmd_arm(seed, "progressive", uniform_box(*FULL_BOX), prog, 50, PROGRESSIVE_THRESHOLD),
            _mmd_arm(seed, "fixed_k25", uniform_box(*FULL_BOX), [(25, 1000)], 50,
                     PROGRESSIVE_THRESHOLD)]


def _stability(seed):
    def arm(name, objective, trainer):
        return ExperimentSpec(
            id=name, p_data=_p_data(), p0=uniform_box(*FULL_BOX), trainer=trainer,
            train=TrainConfig(learning_rate=0.02, schedule=[(5, 1000)],
                              attack=AttackConfig(step_size=0.3), seed=seed,
                              objective=objective, halt_gap=1e6),
            eval=[{"op": "divergence", "threshold": 1e6}],
        )
    return [arm("at_logistic", "at_logistic", "progressive"), arm("ebm_mle", "ebm_mle", "ebm_mle")]


def _minimax(seed):
    def arm(name, p0):
        return ExperimentSpec(
            id=name, p_data=_p_data(), p0=p0, trainer="minimax",
            train=TrainConfig(batch_size=256, seed=seed),
            minimax=MinimaxConfig(critic_steps=20, particle_step=0.05, max_rounds=400),
            eval=[{"op": "particle_mmd", "null_reps": 200, "quantile": 0.99}],
        )
    return [arm("minimax_uniform", uniform_box(*FULL_BOX)),
            arm("minimax_corner", corner_box(*CORNER_BOX))]


def ood_spec_default() -> DistributionSpec:
    return DistributionSpec("ring", center=[0.0, 0.0], radius=3.5, thickness=0.5)


def _ood(seed):
    return [ExperimentSpec(
        id="ood", p_data=_p_data(), p0=uniform_box(*FULL_BOX),
        train=TrainConfig(schedule=[(5, 1500)], attack=AttackConfig(step_size=0.1), seed=seed,
                          real_attack=AttackConfig(step_size=0.05, steps=5, ball_radius=0.25)),
        eval=[{"op": "ood", "ood": to_dict(ood_spec_default()), "n": 200,
               "eps": [0.25, 100.0], "steps": 100, "restarts": 5}],
    )]


RECIPES: dict[str, Callable[[int], list[ExperimentSpec]]] = {
    "fig2": _fig2_pair,
    "fig2_uniform": lambda s: _fig2_pair(s)[:1],
    "fig2_corner": lambda s: _fig2_pair(s)[1:],
    "p0_ablation": _p0_ablation,
    "k_ablation": _k_ablation,
    "progressive_vs_fixed": _progressive_vs_fixed,
    "stability": _stability,
    "minimax": _minimax,
    "ood": _ood,
}


def build_recipe(name: str, seed: int = 0) -> list[ExperimentSpec]:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; known: {', '.join(sorted(RECIPES))}")
    return RECIPES[name](seed)


def run_recipe(name: str, out_dir, seed: int = 0, arms=None) -> list[Path]:
    """Run every arm of a recipe under ``out_dir/<name>-s<seed>`` and tabulate them."""
    specs = build_recipe(name, seed)
    if arms is not None:
        unknown = set(arms) - {s.id for s in specs}
        if unknown:
            raise ConfigError(f"recipe {name!r} has no arm(s) {', '.join(sorted(unknown))}")
        specs = [s for s in specs if s.id in arms]
    base = Path(out_dir) / f"{name}-s{seed}"
    dirs = [run_experiment(s, base) for s in specs]
    if len(dirs) >= 2:
        compare_runs(dirs, base / "comparison.tsv")
        if all((d / "evals.tsv").exists() for d in dirs):
            series_table(dirs, "mmd", base / "mmd_series.tsv")
    return dirs


def load_run_model(run_dir, which: str = "final") -> EnergyModel:
    return load_checkpoint(Path(run_dir) / f"model_{which}.ckpt")
