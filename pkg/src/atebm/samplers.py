"""Contrastive-data generators: normalized-gradient PGD and Langevin (SGLD)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffcore import EnergyModel, NonFiniteError, energy_and_grad_input
from .distributions import Batch


@dataclass
class AttackConfig:
    step_size: float = 0.1
    steps: int = 0
    ball_radius: float | None = None
    zero_grad_tol: float = 1e-12
    record_trajectory: bool = False

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        self.steps = int(self.steps)
        if self.ball_radius is not None and not self.ball_radius > 0:
            raise ValueError("ball_radius must be positive when given")
        if not self.zero_grad_tol > 0:
            raise ValueError("zero_grad_tol must be positive")


@dataclass
class SgldConfig:
    step_size: float = 0.01
    steps: int = 1
    noise_variance: float | None = None  # None -> step_size

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.steps < 1:
            raise ValueError("SGLD needs at least one step")
        if self.noise_variance is not None and self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")

    @property
    def variance(self) -> float:
        return self.step_size if self.noise_variance is None else self.noise_variance


EnergyGrad = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def project_ball(x, center, eps: float) -> np.ndarray:
    """Project rows of ``x`` onto l2 balls of radius ``eps`` around ``center``."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(center, dtype=float)
    d = x - c
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    scale = np.where(norm > eps, eps / np.where(norm > 0, norm, 1.0), 1.0)
    return np.where(norm > eps, c + d * scale, x)


def _normalized_ascent(energy_grad: EnergyGrad, x0: np.ndarray, cfg: AttackConfig,
                       sign: float = 1.0, clamp: np.ndarray | None = None,
                       track_best: bool = False, freeze_level: float | None = None):
    """Shared PGD loop.  ``sign=-1`` descends instead of ascending.

    With ``freeze_level`` set, a point stops moving for good once its energy
    reaches that level.  Returns final points, optional trajectory rows and (if
    ``track_best``) the best iterate seen per point with its energy.
    """
    x = np.array(x0, dtype=float, copy=True)
    traj = [] if cfg.record_trajectory else None
    best_x = best_e = None
    frozen = np.zeros(x.shape[0], dtype=bool)
    for k in range(cfg.steps + 1):
        if k == cfg.steps and traj is None and not track_best:
            break
        try:
            e, g = energy_grad(x)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite energy at PGD step {k}", step=k) from exc
        if traj is not None:
            traj.extend((k, i, *x[i], e[i]) for i in range(x.shape[0]))
        if track_best:
            if best_x is None:
                best_x, best_e = x.copy(), e.copy()
            else:
                better = sign * e > sign * best_e
                best_x[better] = x[better]
                best_e[better] = e[better]
        if k == cfg.steps:
            break
        norm = np.linalg.norm(g, axis=1)
        take = norm >= cfg.zero_grad_tol
        if freeze_level is not None:
            frozen |= sign * e >= sign * freeze_level
            take &= ~frozen
        step = np.zeros_like(x)
        step[take] = g[take] / norm[take, None]
        x = x + sign * cfg.step_size * step
        if cfg.ball_radius is not None:
            x = project_ball(x, x0, cfg.ball_radius)
        if clamp is not None:
            x = np.clip(x, clamp[:, 0], clamp[:, 1])
    return x, traj, best_x, best_e


def _model_energy_grad(model: EnergyModel) -> EnergyGrad:
    return lambda x: energy_and_grad_input(model, x)


def pgd_ascend(model: EnergyModel, start, cfg: AttackConfig, rng=None,
               clamp_bounds=None, source_tag: str = "perturbed"):
    """K steps of ``x <- x + lambda * grad f / ||grad f||``, projected when a ball is set.

    Points whose gradient norm falls below ``zero_grad_tol`` skip that step.
    ``rng`` is accepted for interface symmetry; the attack itself is
    deterministic.  Returns ``(Batch, trajectory_or_None)``.
    """
    x0 = np.asarray(start, dtype=float)
    clamp = None if clamp_bounds is None else np.asarray(clamp_bounds, dtype=float)
    x, traj, _, _ = _normalized_ascent(_model_energy_grad(model), x0, cfg, clamp=clamp)
    return Batch(x, source_tag), traj


def pgd_generate(model: EnergyModel, start, cfg: AttackConfig, freeze_d: float | None = 0.45
                 ) -> Batch:
    """PGD sample generation; a point stops for good once ``D(x) >= freeze_d``.

    Reaching ``D`` close to 1/2 means the point sits in the optimal set of the
    maximin game and has nothing left to gain.  Freezing it there keeps
    samples from piling onto whichever maximum the current model happens to
    have.  ``freeze_d=None`` gives plain ``pgd_ascend``.
    """
    level = None
    if freeze_d is not None:
        if not 0.0 < freeze_d < 1.0:
            raise ValueError("freeze_d must lie in (0, 1)")
        level = float(np.log(freeze_d) - np.log1p(-freeze_d))
    x, _, _, _ = _normalized_ascent(_model_energy_grad(model), np.asarray(start, dtype=float),
                                    cfg, freeze_level=level)
    return Batch(x, "generated")


def pgd_descend(model: EnergyModel, start, cfg: AttackConfig) -> Batch:
    """Same attack lowering ``f``; used on real samples during training."""
    x, _, _, _ = _normalized_ascent(_model_energy_grad(model), np.asarray(start, dtype=float),
                                    cfg, sign=-1.0)
    return Batch(x, "real")


def sgld_chain(model: EnergyModel, start, cfg: SgldConfig, rng: np.random.Generator,
               source_tag: str = "generated") -> Batch:
    """``x <- x + (lambda/2) grad f + N(0, noise_variance I)`` for ``cfg.steps`` steps."""
    x = np.array(start, dtype=float, copy=True)
    std = np.sqrt(cfg.variance)
    for k in range(cfg.steps):
        try:
            _, g = energy_and_grad_input(model, x)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite energy at SGLD step {k}", step=k) from exc
        x = x + 0.5 * cfg.step_size * g + std * rng.standard_normal(x.shape)
    return Batch(x, source_tag)


def compose_and_ascend(models: Sequence[tuple[EnergyModel, float]], start, cfg: AttackConfig,
                       rng=None) -> Batch:
    """PGD on the weighted sum of several energies (concept conjunction)."""
    if not models:
        raise ValueError("need at least one model")
    dims = {m.input_dim for m, _ in models}
    if len(dims) != 1:
        raise ValueError(f"models disagree on input_dim: {sorted(dims)}")
    if not all(np.isfinite(w) for _, w in models):
        raise ValueError("weights must be finite")

    def energy_grad(x):
        e, g = energy_and_grad_input(models[0][0], x)
        e, g = models[0][1] * e, models[0][1] * g
        for m, w in models[1:]:
            ei, gi = energy_and_grad_input(m, x)
            e = e + w * ei
            g = g + w * gi
        return e, g

    x, _, _, _ = _normalized_ascent(energy_grad, np.asarray(start, dtype=float), cfg)
    return Batch(x, "generated")


def interpolate_then_ascend(model: EnergyModel, xa, xb, n_points: int, cfg: AttackConfig,
                            rng=None) -> Batch:
    """Ascend every point of the segment grid ``(1-t) xa + t xb``, ``t`` in [0, 1]."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    t = np.linspace(0.0, 1.0, n_points)[:, None]
    grid = (1.0 - t) * xa + t * xb
    return pgd_ascend(model, grid, cfg, source_tag="generated")[0]


def write_trajectory(path, traj) -> None:
    """Dump ``pgd_ascend`` trajectory rows as a tab-separated table."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        width = len(traj[0]) - 3 if traj else 2
        w.writerow(("step", "point", *(f"x{i}" for i in range(width)), "energy"))
        for row in traj:
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


def read_trajectory(path) -> np.ndarray:
    return np.loadtxt(path, delimiter="\t", skiprows=1, ndmin=2)
