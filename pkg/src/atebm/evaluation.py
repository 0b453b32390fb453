"""Probes and metrics for trained 2D energy models."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit
from scipy.stats import rankdata

from .diffcore import EnergyModel, energy_forward, grad_input
from .distributions import DistributionSpec, in_support
from .samplers import AttackConfig, _model_energy_grad, project_ball
from .training import RunRecord


@dataclass
class GridSpec:
    bounds: list[list[float]]  # [[x0_lo, x0_hi], [x1_lo, x1_hi]]
    resolution: int = 200

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.shape != (2, 2) or np.any(b[:, 1] <= b[:, 0]):
            raise ValueError("grid bounds must be a non-degenerate 2D box")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        b = np.asarray(self.bounds, dtype=float)
        return (np.linspace(b[0, 0], b[0, 1], self.resolution),
                np.linspace(b[1, 0], b[1, 1], self.resolution))

    def points(self) -> np.ndarray:
        """Grid points, row-major with the second coordinate as the row index."""
        gx, gy = self.axes()
        xx, yy = np.meshgrid(gx, gy)
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class OodReport:
    clean_auroc: float
    adversarial_auroc: float
    attack: AttackConfig
    restarts: int
    score_direction: str = "higher f = more in-distribution"


def _energy_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, EnergyModel):
        return lambda x: energy_forward(model, x)
    return model


def support_probe(model: EnergyModel, p_data: DistributionSpec, grid: GridSpec,
                  mass_level: float = 0.95) -> dict:
    """Compare ``D = sigmoid(f)`` with 1/2 on and off the data support."""
    if p_data.dim != 2:
        raise ValueError("support_probe works on 2D distributions only")
    pts = grid.points()
    d = expit(energy_forward(model, pts))
    on = in_support(p_data, pts, mass_level)
    off = ~on
    return {
        "mean_abs_dev_on_support": float(np.mean(np.abs(d[on] - 0.5))) if on.any() else math.nan,
        "max_D_off_support": float(np.max(d[off])) if off.any() else math.nan,
        "fraction_off_support_leq_half": float(np.mean(d[off] <= 0.5)) if off.any() else math.nan,
        "n_on_support": int(on.sum()),
        "n_off_support": int(off.sum()),
    }


@dataclass
class MaximaCensus:
    count: int
    locations: np.ndarray


def local_maxima_census(model, grid: GridSpec, margin: float = 1e-6,
                        support: DistributionSpec | None = None,
                        mass_level: float = 0.95) -> MaximaCensus:
    """Grid points where ``f`` beats every existing 8-neighbour by ``margin``.

    Maxima are taken over the bounded domain, so an edge or corner point only
    competes with the neighbours inside the grid; a model whose output keeps
    rising towards the domain edge therefore still registers a maximum there.
    ``model`` may be an EnergyModel or any vectorized callable.  With
    ``support`` given, only maxima outside its ``mass_level`` region are kept.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    r = grid.resolution
    pts = grid.points()
    f = np.asarray(_energy_fn(model)(pts), dtype=float).reshape(r, r)
    padded = np.pad(f, 1, constant_values=-np.inf)
    is_max = np.ones_like(f, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = padded[1 + di:r + 1 + di, 1 + dj:r + 1 + dj]
            is_max &= f >= nb + margin
    ii, jj = np.nonzero(is_max)
    locs = pts.reshape(r, r, 2)[ii, jj]
    if support is not None and len(locs):
        locs = locs[~in_support(support, locs, mass_level)]
    return MaximaCensus(int(len(locs)), locs)


def _kernel_sum(a, b, bandwidths):
    d2 = cdist(a, b, "sqeuclidean")
    return sum(np.exp(-d2 / (2.0 * h * h)) for h in bandwidths)


def mmd2(a, b, bandwidths: Sequence[float] = (0.25, 0.5, 1.0, 2.0)) -> float:
    """Unbiased squared MMD with a sum of Gaussian kernels."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("batches must be 2D arrays of equal width")
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise ValueError("need at least two points per batch")
    kaa = _kernel_sum(a, a, bandwidths)
    kbb = _kernel_sum(b, b, bandwidths)
    kab = _kernel_sum(a, b, bandwidths)
    term_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def mmd_null_quantile(draw: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
                      rng: np.random.Generator, reps: int = 200, q: float = 0.99,
                      bandwidths: Sequence[float] = (0.25, 0.5, 1.0, 2.0)) -> float:
    """Quantile of mmd2 between pairs of batches drawn from the same law."""
    vals = [mmd2(*draw(rng), bandwidths=bandwidths) for _ in range(reps)]
    return float(np.quantile(vals, q))


def auroc(in_scores, out_scores) -> float:
    """P(score_in > score_out) + 0.5 P(tie), via average ranks."""
    s_in = np.asarray(in_scores, dtype=float).ravel()
    s_out = np.asarray(out_scores, dtype=float).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("empty score set")
    ranks = rankdata(np.concatenate([s_in, s_out]))
    u = ranks[: s_in.size].sum() - s_in.size * (s_in.size + 1) / 2.0
    return float(u / (s_in.size * s_out.size))


def ood_auroc(model: EnergyModel, in_batch, out_batch) -> float:
    return auroc(energy_forward(model, in_batch), energy_forward(model, out_batch))


def worst_case_points(model: EnergyModel, points, attack: AttackConfig, restarts: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Maximize ``f`` inside an l2 ball around each point, keeping the best of all restarts.

    The first restart starts at the point itself; later ones start uniformly in
    a ball of radius ``min(eps, step_size * steps / 2)``.  Every iterate is
    scored and the best one kept, so the returned score is never below the
    clean score.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if attack.ball_radius is None:
        raise ValueError("worst-case attack needs a ball radius")
    x0 = np.asarray(points, dtype=float)
    eg = _model_energy_grad(model)
    best_x, best_e = None, None
    r0 = min(attack.ball_radius, attack.step_size * attack.steps / 2.0)
    for k in range(restarts):
        if k == 0:
            start = x0.copy()
        else:
            d = rng.standard_normal(x0.shape)
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            rad = r0 * rng.uniform(size=(x0.shape[0], 1)) ** (1.0 / x0.shape[1])
            start = project_ball(x0 + rad * d, x0, attack.ball_radius)
        # projection is onto the ball around the clean point, not the restart start
        x, e = _ascend_in_ball(eg, start, x0, attack)
        if best_x is None:
            best_x, best_e = x, e
        else:
            better = e > best_e
            best_x[better] = x[better]
            best_e[better] = e[better]
    return best_x, best_e


def _ascend_in_ball(energy_grad, start, center, cfg: AttackConfig):
    x = start.copy()
    best_x, best_e = None, None
    for k in range(cfg.steps + 1):
        e, g = energy_grad(x)
        if best_x is None:
            best_x, best_e = x.copy(), e.copy()
        else:
            better = e > best_e
            best_x[better] = x[better]
            best_e[better] = e[better]
        if k == cfg.steps:
            break
        norm = np.linalg.norm(g, axis=1)
        take = norm >= cfg.zero_grad_tol
        step = np.zeros_like(x)
        step[take] = g[take] / norm[take, None]
        x = project_ball(x + cfg.step_size * step, center, cfg.ball_radius)
    return best_x, best_e


def adversarial_ood_auroc(model: EnergyModel, in_batch, out_batch, attack: AttackConfig,
                          restarts: int = 5, rng: np.random.Generator | None = None) -> OodReport:
    if rng is None:
        rng = np.random.default_rng(0)
    s_in = energy_forward(model, in_batch)
    s_out = energy_forward(model, out_batch)
    _, adv = worst_case_points(model, out_batch, attack, restarts, rng)
    return OodReport(auroc(s_in, s_out), auroc(s_in, adv), attack, restarts)


def divergence_monitor(record, threshold: float = 1e6) -> dict:
    """First iteration whose gap exceeds ``threshold`` or is non-finite.

    ``record`` is a RunRecord or a plain sequence of gap values (then the
    reported iteration is the index).
    """
    if isinstance(record, RunRecord):
        if not record.rows:
            raise ValueError("empty record")
        its = [r["iteration"] for r in record.rows]
        gaps = [r.get("gap", math.nan) for r in record.rows]
    else:
        gaps = list(record)
        if not gaps:
            raise ValueError("empty series")
        its = list(range(len(gaps)))
    for it, g in zip(its, gaps):
        if not np.isfinite(g) or g > threshold:
            return {"diverged": True, "iteration": it}
    return {"diverged": False, "iteration": None}


# --- plotting ----------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def field_arrows(model: EnergyModel, grid: GridSpec, every: int = 10) -> np.ndarray:
    """Rows ``(x, y, ux, uy)``: unit gradient directions on a subsampled grid."""
    gx, gy = grid.axes()
    xx, yy = np.meshgrid(gx[::every], gy[::every])
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    g = grad_input(model, pts)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    u = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
    return np.hstack([pts, u])


def field_plot(model: EnergyModel, grid: GridSpec, overlays: Sequence = (), path=None,
               levels: int = 12, arrow_every: int = 10, size: int = 480) -> str:
    """Write an SVG with f-contours, unit gradient arrows and point overlays.

    Every arrow carries ``data-x``/``data-y``/``data-ux``/``data-uy``
    attributes with the exact direction used.  Returns the SVG text.
    """
    import contourpy

    b = np.asarray(grid.bounds, dtype=float)
    gx, gy = grid.axes()
    f = energy_forward(model, grid.points()).reshape(grid.resolution, grid.resolution)
    sx = size / (b[0, 1] - b[0, 0])
    sy = size / (b[1, 1] - b[1, 0])

    def px(x, y):
        return (x - b[0, 0]) * sx, size - (y - b[1, 0]) * sy

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black"/>',
        '<g id="contours" fill="none" stroke="#888888" stroke-width="0.8">',
    ]
    gen = contourpy.contour_generator(gx, gy, f)
    lo, hi = float(f.min()), float(f.max())
    if hi > lo:
        for lev in np.linspace(lo, hi, levels + 2)[1:-1]:
            for line in gen.lines(lev):
                coords = " ".join("%.2f,%.2f" % px(x, y) for x, y in line)
                out.append(f'<polyline data-level="{lev:.6g}" points="{coords}"/>')
    out.append("</g>")
    out.append('<g id="arrows" stroke="black" stroke-width="0.8">')
    arrow_len = 0.8 * arrow_every * (b[0, 1] - b[0, 0]) / (grid.resolution - 1)
    for x, y, ux, uy in field_arrows(model, grid, arrow_every):
        x1, y1 = px(x, y)
        x2, y2 = px(x + arrow_len * ux, y + arrow_len * uy)
        out.append(
            f'<line data-x="{float(x)!r}" data-y="{float(y)!r}" '
            f'data-ux="{float(ux)!r}" data-uy="{float(uy)!r}" '
            f'x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}"/>'
        )
        out.append(f'<circle cx="{x2:.2f}" cy="{y2:.2f}" r="1.2"/>')
    out.append("</g>")
    for i, pts in enumerate(overlays):
        pts = np.asarray(pts, dtype=float)
        color = _COLORS[i % len(_COLORS)]
        out.append(f'<g id="overlay{i}" fill="{color}" stroke="none">')
        for x, y in pts:
            cx, cy = px(x, y)
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="1.5"/>')
        out.append("</g>")
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
