"""Synthetic 2D (or d-dimensional) data and p0 generators."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

KINDS = ("gaussian", "gaussian_mixture", "ring", "uniform_box", "corner_box")
SOURCE_TAGS = ("real", "p0", "perturbed", "generated")

DEFAULT_BOUNDS = [[-4.0, 4.0], [-4.0, 4.0]]


def derive_rng(seed: int, key: str) -> np.random.Generator:
    """Independent generator for a named substream of a master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8"))])


@dataclass
class DistributionSpec:
    """Generative description of a distribution.

    Which fields matter depends on ``kind``:

    * ``gaussian``: ``mean``, ``cov``
    * ``gaussian_mixture``: ``components``, a list of ``{weight, mean, cov}``
    * ``ring``: ``center``, ``radius``, ``thickness`` (uniform annulus of that width)
    * ``uniform_box`` / ``corner_box``: ``lo``, ``hi``
    """

    kind: str
    mean: list[float] | None = None
    cov: list[list[float]] | None = None
    components: list[dict[str, Any]] | None = None
    center: list[float] | None = None
    radius: float | None = None
    thickness: float | None = None
    lo: list[float] | None = None
    hi: list[float] | None = None
    domain_bounds: list[list[float]] = field(default_factory=lambda: [list(b) for b in DEFAULT_BOUNDS])

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported distribution kind {self.kind!r}")
        if self.kind == "gaussian":
            _check_cov(self.mean, self.cov)
        elif self.kind == "gaussian_mixture":
            if not self.components:
                raise ValueError("mixture needs components")
            ws = np.array([c["weight"] for c in self.components], dtype=float)
            if np.any(ws <= 0) or abs(ws.sum() - 1.0) > 1e-12:
                raise ValueError("mixture weights must be positive and sum to 1")
            for c in self.components:
                _check_cov(c["mean"], c["cov"])
        elif self.kind == "ring":
            if self.center is None or len(self.center) != 2:
                raise ValueError("ring is 2D and needs a center")
            if not (self.thickness and self.thickness > 0 and self.radius and self.radius > self.thickness / 2):
                raise ValueError("ring needs radius > thickness/2 > 0")
        else:
            lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
            if lo.shape != hi.shape or lo.ndim != 1 or not np.all(lo < hi):
                raise ValueError("box needs lo < hi componentwise")

    @property
    def dim(self) -> int:
        if self.kind == "gaussian":
            return len(self.mean)
        if self.kind == "gaussian_mixture":
            return len(self.components[0]["mean"])
        if self.kind == "ring":
            return 2
        return len(self.lo)

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.domain_bounds, dtype=float)


def _check_cov(mean, cov):
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
        raise ValueError("covariance shape does not match mean")
    if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
        raise ValueError("covariance must be symmetric")
    if np.any(np.linalg.eigvalsh(cov) <= 0):
        raise ValueError("covariance must be positive definite")


def gaussian(mean=(0.0, 0.0), std: float = 1.0, **kw) -> DistributionSpec:
    d = len(mean)
    return DistributionSpec("gaussian", mean=list(map(float, mean)),
                            cov=(std ** 2 * np.eye(d)).tolist(), **kw)


def uniform_box(lo, hi, **kw) -> DistributionSpec:
    return DistributionSpec("uniform_box", lo=list(map(float, lo)), hi=list(map(float, hi)), **kw)


def corner_box(lo, hi, **kw) -> DistributionSpec:
    return DistributionSpec("corner_box", lo=list(map(float, lo)), hi=list(map(float, hi)), **kw)


@dataclass
class Batch:
    points: np.ndarray
    source_tag: str = "real"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source tag {self.source_tag!r}")

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def __len__(self):
        return self.points.shape[0]


def sample(spec: DistributionSpec, n: int, rng: np.random.Generator,
           source_tag: str = "real", clamp: bool = False) -> Batch:
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.kind == "gaussian":
        pts = _sample_gaussian(spec.mean, spec.cov, n, rng)
    elif spec.kind == "gaussian_mixture":
        ws = np.array([c["weight"] for c in spec.components])
        idx = rng.choice(len(ws), size=n, p=ws)
        pts = np.empty((n, spec.dim))
        for k, c in enumerate(spec.components):
            sel = idx == k
            if sel.any():
                pts[sel] = _sample_gaussian(c["mean"], c["cov"], int(sel.sum()), rng)
    elif spec.kind == "ring":
        r_in = spec.radius - spec.thickness / 2
        r_out = spec.radius + spec.thickness / 2
        # uniform in area over the annulus
        r = np.sqrt(rng.uniform(r_in ** 2, r_out ** 2, size=n))
        phi = rng.uniform(0.0, 2 * np.pi, size=n)
        pts = np.asarray(spec.center) + np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    elif spec.kind in ("uniform_box", "corner_box"):
        pts = rng.uniform(spec.lo, spec.hi, size=(n, len(spec.lo)))
    else:  # pragma: no cover - guarded in __post_init__
        raise ValueError(spec.kind)
    if clamp:
        b = spec.bounds
        pts = np.clip(pts, b[:, 0], b[:, 1])
    return Batch(pts, source_tag)


def _sample_gaussian(mean, cov, n, rng):
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    return np.asarray(mean, dtype=float) + rng.standard_normal((n, len(mean))) @ chol.T


def _gauss_logpdf(x, mean, cov):
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    chol = np.linalg.cholesky(cov)
    diff = np.linalg.solve(chol, (x - mean).T).T
    maha = np.sum(diff * diff, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + len(mean) * np.log(2 * np.pi)), maha


def log_density(spec: DistributionSpec, x) -> np.ndarray | float:
    """Exact log density; -inf outside the support of uniform kinds.

    Accepts a single point or an ``(n, d)`` array.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    if spec.kind == "gaussian":
        out = _gauss_logpdf(pts, spec.mean, spec.cov)[0]
    elif spec.kind == "gaussian_mixture":
        terms = [np.log(c["weight"]) + _gauss_logpdf(pts, c["mean"], c["cov"])[0]
                 for c in spec.components]
        out = logsumexp(np.stack(terms), axis=0)
    elif spec.kind == "ring":
        r = np.linalg.norm(pts - np.asarray(spec.center), axis=1)
        r_in = spec.radius - spec.thickness / 2
        r_out = spec.radius + spec.thickness / 2
        area = np.pi * (r_out ** 2 - r_in ** 2)
        out = np.where((r >= r_in) & (r <= r_out), -np.log(area), -np.inf)
    else:
        lo, hi = np.asarray(spec.lo), np.asarray(spec.hi)
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        out = np.where(inside, -np.sum(np.log(hi - lo)), -np.inf)
    return float(out[0]) if single else out


@lru_cache(maxsize=64)
def _mixture_threshold(key: str, mass_level: float) -> float:
    spec = _SPEC_CACHE[key]
    pts = sample(spec, 200_000, derive_rng(0, "hdr-threshold")).points
    return float(np.quantile(log_density(spec, pts), 1.0 - mass_level))


_SPEC_CACHE: dict[str, DistributionSpec] = {}


def in_support(spec: DistributionSpec, x, mass_level: float = 0.95) -> np.ndarray | bool:
    """Membership in the highest-density region holding ``mass_level`` of the mass."""
    if not 0.0 < mass_level < 1.0:
        raise ValueError("mass_level must lie in (0, 1)")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    if spec.kind == "gaussian":
        maha = _gauss_logpdf(pts, spec.mean, spec.cov)[1]
        out = maha <= chi2.ppf(mass_level, spec.dim)
    elif spec.kind == "gaussian_mixture":
        key = repr(spec)
        _SPEC_CACHE[key] = spec
        out = log_density(spec, pts) >= _mixture_threshold(key, mass_level)
    else:
        # flat densities: every level set is the whole support
        out = np.isfinite(log_density(spec, pts))
    return bool(out[0]) if single else out
