"""Binary adversarial training loops, the likelihood-gradient twin, the
particle minimax solver, Adam and run records."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffcore import (  # noqa: F401  (checkpoint I/O re-exported)
    EnergyModel,
    NonFiniteError,
    load_checkpoint,
    save_checkpoint,
)
from .distributions import Batch, DistributionSpec, derive_rng, sample
from .objectives import at_grad_closed, at_loss, ebm_mle_grad, r1_term
from .samplers import AttackConfig, pgd_ascend, pgd_descend

OBJECTIVES = ("at_logistic", "ebm_mle")


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    r1_gamma: float = 0.0
    schedule: list[tuple[int, int]] = field(default_factory=lambda: [(10, 1000)])
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(step_size=0.25))
    real_attack: AttackConfig | None = None
    seed: int = 0
    objective: str = "at_logistic"
    halt_gap: float | None = None
    clamp_to_domain: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        self.schedule = [(int(k), int(n)) for k, n in self.schedule]
        if not self.schedule:
            raise ValueError("schedule is empty")
        ks = [k for k, _ in self.schedule]
        if any(b < a for a, b in zip(ks, ks[1:])):
            raise ValueError("schedule K values must be non-decreasing")
        if any(k < 0 or n < 0 for k, n in self.schedule):
            raise ValueError("schedule entries must be non-negative")

    @property
    def total_iterations(self) -> int:
        return sum(n for _, n in self.schedule)


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def fresh(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: OptimizerState,
              cfg: TrainConfig) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update that *minimizes* the loss whose gradient is ``grad``."""
    if not (theta.shape == grad.shape == state.first_moment.shape):
        raise ValueError("parameter, gradient and moment lengths differ")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new, OptimizerState(m, v, t)


RECORD_COLUMNS = (
    "iteration", "K", "objective", "real_term", "fake_term", "gap",
    "displacement", "r1", "grad_norm", "mean_d_real", "mean_d_fake", "status",
)


@dataclass
class RunRecord:
    """Per-iteration metrics.  Wall time is kept apart so the table stays reproducible."""

    rows: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    diverged_at: int | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def append(self, row: dict) -> None:
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("iterations must be strictly increasing")
        self.rows.append(row)

    def write(self, path) -> None:
        _write_table(path, RECORD_COLUMNS, self.rows)

    def write_evals(self, path) -> None:
        cols: list[str] = []
        for e in self.evals:
            cols.extend(k for k in e if k not in cols)
        _write_table(path, cols, self.evals)

    @classmethod
    def read(cls, path, evals_path=None) -> "RunRecord":
        rows = _read_table(path)
        rec = cls(rows=rows)
        if evals_path is not None and Path(evals_path).exists():
            rec.evals = _read_table(evals_path)
        for r in rows:
            if r.get("status") == "diverged":
                rec.diverged_at = int(r["iteration"])
        return rec


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_table(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) if c in r else "" for c in columns])


def _read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        out = []
        for r in reader:
            row = {}
            for k, v in r.items():
                if v == "":
                    continue
                try:
                    row[k] = int(v)
                except ValueError:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            out.append(row)
    return out


Monitor = Callable[[int, EnergyModel], dict]


def _run_schedule(model: EnergyModel, p_data: DistributionSpec, p0: DistributionSpec,
                  cfg: TrainConfig, monitor: Monitor | None = None, monitor_every: int = 0,
                  ) -> tuple[EnergyModel, RunRecord]:
    model = model.copy()
    rng = derive_rng(cfg.seed, "train-batches")
    state = OptimizerState.fresh(model.n_params)
    theta = model.get_params()
    rec = RunRecord()
    clamp = p0.bounds if cfg.clamp_to_domain else None
    m = cfg.batch_size

    def run_monitor(it):
        if monitor is not None:
            rec.evals.append({"iteration": it, **monitor(it, model)})

    run_monitor(0)
    it = 0
    for K, n_iter in cfg.schedule:
        attack = AttackConfig(step_size=cfg.attack.step_size, steps=K,
                              ball_radius=cfg.attack.ball_radius,
                              zero_grad_tol=cfg.attack.zero_grad_tol)
        for _ in range(n_iter):
            it += 1
            t0 = time.perf_counter()
            real = sample(p_data, m, rng).points
            x0 = sample(p0, m, rng, source_tag="p0").points
            row = {"iteration": it, "K": K}
            try:
                fake = pgd_ascend(model, x0, attack, clamp_bounds=clamp)[0].points
                if cfg.real_attack is not None and cfg.real_attack.steps > 0:
                    real = pgd_descend(model, real, cfg.real_attack).points
                if cfg.objective == "at_logistic":
                    rep = at_loss(model, real, fake, with_grad=False)
                    ascent = at_grad_closed(model, real, fake)
                else:
                    rep = ebm_mle_grad(model, real, fake)
                    ascent = rep.grad
                r1, r1_grad = r1_term(model, real, cfg.r1_gamma)
                ascent = ascent - r1_grad
            except (NonFiniteError, FloatingPointError):
                row.update(objective=math.nan, gap=math.nan, status="diverged")
                rec.append(row)
                rec.diverged_at = it
                rec.wall_time.append(time.perf_counter() - t0)
                return model, rec
            gap = rep.aux["gap"]
            row.update(
                objective=rep.value, real_term=rep.real_term, fake_term=rep.fake_term, gap=gap,
                displacement=float(np.mean(np.linalg.norm(fake - x0, axis=1))),
                r1=r1, grad_norm=float(np.linalg.norm(ascent)),
                mean_d_real=rep.aux.get("mean_sigmoid_real", math.nan),
                mean_d_fake=rep.aux.get("mean_sigmoid_fake", math.nan),
                status="ok",
            )
            bad = not (np.isfinite(rep.value) and np.isfinite(gap) and np.all(np.isfinite(ascent)))
            if bad or (cfg.halt_gap is not None and abs(gap) > cfg.halt_gap):
                row["status"] = "diverged"
                rec.append(row)
                rec.diverged_at = it
                rec.wall_time.append(time.perf_counter() - t0)
                return model, rec
            theta, state = adam_step(theta, -ascent, state, cfg)
            model.set_params(theta)
            rec.append(row)
            rec.wall_time.append(time.perf_counter() - t0)
            if monitor_every and it % monitor_every == 0:
                run_monitor(it)
    if monitor is not None and (not monitor_every or it % monitor_every):
        run_monitor(it)
    return model, rec


def train_binary_at(model: EnergyModel, p_data: DistributionSpec, p0: DistributionSpec,
                    cfg: TrainConfig, monitor: Monitor | None = None, monitor_every: int = 0):
    """Binary adversarial training with a single fixed K.

    Each iteration draws a data batch and a p0 batch, moves the p0 batch by K
    unconstrained PGD steps and takes one Adam step on ``-J`` (plus R1 when
    ``r1_gamma > 0``).  The input model is left untouched; the trained copy is
    returned with its RunRecord.
    """
    if cfg.objective != "at_logistic":
        raise ValueError("train_binary_at needs objective='at_logistic'")
    if len(cfg.schedule) != 1:
        raise ValueError("train_binary_at takes a single-entry schedule; use train_progressive")
    return _run_schedule(model, p_data, p0, cfg, monitor, monitor_every)


def train_progressive(model: EnergyModel, p_data: DistributionSpec, p0: DistributionSpec,
                      cfg: TrainConfig, monitor: Monitor | None = None, monitor_every: int = 0):
    """Binary AT over a growing-K schedule; Adam moments carry across segments."""
    if cfg.objective != "at_logistic":
        raise ValueError("train_progressive needs objective='at_logistic'")
    return _run_schedule(model, p_data, p0, cfg, monitor, monitor_every)


def train_ebm_mle_with_pgd(model: EnergyModel, p_data: DistributionSpec, p0: DistributionSpec,
                           cfg: TrainConfig, monitor: Monitor | None = None,
                           monitor_every: int = 0):
    """Same loop with the update replaced by the unscaled gap gradient.

    Divergence is the expected outcome and ends the run quietly; check
    ``record.diverged_at``.
    """
    if cfg.objective != "ebm_mle":
        raise ValueError("train_ebm_mle_with_pgd needs objective='ebm_mle'")
    return _run_schedule(model, p_data, p0, cfg, monitor, monitor_every)


@dataclass
class MinimaxConfig:
    critic_steps: int = 20
    particle_step: float = 0.05
    displacement_tol: float = 1e-6
    max_rounds: int = 400
    early_stop_tol: float = 1e-6
    early_stop_window: int = 10


def train_minimax_particles(model: EnergyModel, p_data: DistributionSpec, p0: DistributionSpec,
                            cfg: TrainConfig, inner: MinimaxConfig,
                            monitor: Callable[[int, EnergyModel, np.ndarray], dict] | None = None,
                            monitor_every: int = 0):
    """Particle solver for the minimax (GAN-style) formulation.

    A data sample and a particle set are drawn once.  Each round re-fits the
    critic for up to ``critic_steps`` Adam steps (stopping early once J moves by
    less than ``early_stop_tol`` over ``early_stop_window`` updates), then moves
    every particle one normalized-gradient step uphill on ``f``.  Stops when the
    mean particle displacement in a round drops below ``displacement_tol`` or
    after ``max_rounds``.
    """
    if cfg.objective != "at_logistic":
        raise ValueError("minimax solver needs objective='at_logistic'")
    model = model.copy()
    rng = derive_rng(cfg.seed, "minimax-init")
    real = sample(p_data, cfg.batch_size, rng).points
    particles = sample(p0, cfg.batch_size, rng, source_tag="p0").points
    state = OptimizerState.fresh(model.n_params)
    theta = model.get_params()
    rec = RunRecord()
    it = 0
    for rnd in range(1, inner.max_rounds + 1):
        history: list[float] = []
        for _ in range(inner.critic_steps):
            try:
                rep = at_loss(model, real, particles, with_grad=False)
                ascent = at_grad_closed(model, real, particles)
            except NonFiniteError:
                rec.diverged_at = it + 1
                rec.append({"iteration": it + 1, "K": 1, "objective": math.nan,
                            "gap": math.nan, "status": "diverged"})
                return model, Batch(particles, "generated"), rec
            r1, r1_grad = r1_term(model, real, cfg.r1_gamma)
            ascent = ascent - r1_grad
            theta, state = adam_step(theta, -ascent, state, cfg)
            model.set_params(theta)
            it += 1
            history.append(rep.value)
            if (len(history) > inner.early_stop_window
                    and abs(history[-1] - history[-1 - inner.early_stop_window]) < inner.early_stop_tol):
                break
        if inner.particle_step > 0:
            step_cfg = AttackConfig(step_size=inner.particle_step, steps=1,
                                    zero_grad_tol=cfg.attack.zero_grad_tol)
            moved = pgd_ascend(model, particles, step_cfg)[0].points
        else:
            moved = particles
        disp = float(np.mean(np.linalg.norm(moved - particles, axis=1)))
        particles = moved
        rec.append({
            "iteration": it, "K": 1, "objective": rep.value, "real_term": rep.real_term,
            "fake_term": rep.fake_term, "gap": rep.aux["gap"], "displacement": disp,
            "r1": r1, "grad_norm": float(np.linalg.norm(ascent)),
            "mean_d_real": rep.aux["mean_sigmoid_real"],
            "mean_d_fake": rep.aux["mean_sigmoid_fake"], "status": "ok",
        })
        if monitor is not None and monitor_every and rnd % monitor_every == 0:
            rec.evals.append({"iteration": it, "round": rnd, **monitor(it, model, particles)})
        if disp < inner.displacement_tol:
            break
    return model, Batch(particles, "generated"), rec


__all__ = [
    "TrainConfig", "OptimizerState", "RunRecord", "MinimaxConfig", "adam_step",
    "train_binary_at", "train_progressive", "train_ebm_mle_with_pgd",
    "train_minimax_particles", "save_checkpoint", "load_checkpoint", "RECORD_COLUMNS",
]
