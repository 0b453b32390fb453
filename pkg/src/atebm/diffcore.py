"""Dense float64 energy networks with hand-written reverse-mode derivatives.

The network is a plain MLP ``x -> a(W1 x + b1) -> ... -> w_L h + b_L`` with a
single scalar output.  Besides the usual input and parameter gradients we need
the parameter gradient of the mean squared input-gradient norm (the R1
penalty), which is obtained by running reverse mode over the backward pass
itself rather than by finite differences.

Parameters are flattened layer by layer, weight matrix (row-major, shape
``(out, in)``) before bias vector.  That order is the checkpoint layout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class NonFiniteError(ValueError):
    """Raised when a NaN/Inf shows up in inputs or outputs."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg)
        self.step = step


class CheckpointError(ValueError):
    pass


# --- activations: value, first and second derivative -------------------------

def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_d1(z):
    return expit(z)


def _softplus_d2(z):
    s = expit(z)
    return s * (1.0 - s)


def _swish(z):
    return z * expit(z)


def _swish_d1(z):
    s = expit(z)
    return s + z * s * (1.0 - s)


def _swish_d2(z):
    s = expit(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


def _tanh_d1(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


ACTIVATIONS: dict[str, tuple[Callable, Callable, Callable]] = {
    "softplus": (_softplus, _softplus_d1, _softplus_d2),
    "swish": (_swish, _swish_d1, _swish_d2),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
}


@dataclass
class EnergyModel:
    """Scalar MLP ``f_theta``.  ``weights[l]`` has shape ``(out, in)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "softplus"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation {self.activation!r} is not twice differentiable or unknown; "
                f"choose from {sorted(ACTIVATIONS)}"
            )
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: weight {w.shape} and bias {b.shape} disagree")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input width {w.shape[1]} does not chain")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("final layer must have exactly one output unit")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        i = 0
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = theta[i:i + w.size].reshape(w.shape).copy()
            i += w.size
            self.biases[l] = theta[i:i + b.size].copy()
            i += b.size

    def with_params(self, theta: np.ndarray) -> "EnergyModel":
        m = self.copy()
        m.set_params(theta)
        return m

    def copy(self) -> "EnergyModel":
        return EnergyModel([w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.activation)

    def unflatten(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into per-layer ``(W, b)`` views shaped like this model."""
        out, i = [], 0
        for w, b in zip(self.weights, self.biases):
            out.append((theta[i:i + w.size].reshape(w.shape), theta[i + w.size:i + w.size + b.size]))
            i += w.size + b.size
        return out


def init_model(sizes: Sequence[int], activation: str = "softplus",
               rng: np.random.Generator | int = 0) -> EnergyModel:
    """He-normal weights, zero biases.  ``sizes`` like ``[2, 64, 64, 1]``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if sizes[-1] != 1:
        raise ValueError("last size must be 1")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return EnergyModel(ws, bs, activation)


# --- forward / backward ---------------------------------------------------------

def _as_batch(model: EnergyModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"batch shape {x.shape} does not match input_dim {model.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite input")
    return x


def _affine(h: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum reduces each row independently, so row-at-a-time == batched, bitwise
    return np.einsum("nk,jk->nj", h, w) + b


def _forward(model: EnergyModel, x: np.ndarray):
    act = ACTIVATIONS[model.activation][0]
    hs, zs = [x], []
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = _affine(h, w, b)
        zs.append(z)
        h = act(z)
        hs.append(h)
    out = _affine(h, model.weights[-1], model.biases[-1])[:, 0]
    return out, zs, hs


def _check_out(out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite energy")
    return out


def energy_forward(model: EnergyModel, batch) -> np.ndarray:
    """``f_theta(x)`` for every row of ``batch``."""
    x = _as_batch(model, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        out, _, _ = _forward(model, x)
    return _check_out(out)


def _input_backward(model: EnergyModel, zs: list[np.ndarray], n: int):
    """Backward pass seeded with ones at the output.

    Returns ``gh`` (d out / d h_l for every layer input, ``gh[0]`` is the input
    gradient) and ``us`` (d out / d z_l).
    """
    d1 = ACTIVATIONS[model.activation][1]
    L = len(model.weights)
    gh: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    us: list[np.ndarray] = [None] * (L - 1)  # type: ignore[list-item]
    gh[L - 1] = np.broadcast_to(model.weights[-1], (n, model.weights[-1].shape[1]))
    for l in range(L - 2, -1, -1):
        us[l] = gh[l + 1] * d1(zs[l])
        gh[l] = us[l] @ model.weights[l]
    return gh, us


def energy_and_grad_input(model: EnergyModel, batch) -> tuple[np.ndarray, np.ndarray]:
    x = _as_batch(model, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        out, zs, _ = _forward(model, x)
        gh, _ = _input_backward(model, zs, x.shape[0])
    return _check_out(out), np.array(gh[0])


def grad_input(model: EnergyModel, batch) -> np.ndarray:
    """Row ``i`` is ``grad_x f(x_i)``."""
    return energy_and_grad_input(model, batch)[1]


def grad_params(model: EnergyModel, batch, out_weights) -> np.ndarray:
    """Gradient over theta of ``sum_i out_weights[i] * f(x_i)``, canonical order."""
    x = _as_batch(model, batch)
    c = np.asarray(out_weights, dtype=np.float64).reshape(-1)
    if c.shape[0] != x.shape[0]:
        raise ValueError(f"{c.shape[0]} output weights for {x.shape[0]} rows")
    d1 = ACTIVATIONS[model.activation][1]
    _, zs, hs = _forward(model, x)
    L = len(model.weights)
    gW: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    gz = c[:, None]
    for l in range(L - 1, -1, -1):
        gW[l] = gz.T @ hs[l]
        gb[l] = gz.sum(axis=0)
        if l > 0:
            gz = (gz @ model.weights[l]) * d1(zs[l - 1])
    return _flatten(gW, gb)


def _flatten(gW, gb) -> np.ndarray:
    parts = []
    for w, b in zip(gW, gb):
        parts.append(np.asarray(w).ravel())
        parts.append(np.asarray(b).ravel())
    return np.concatenate(parts)


def grad_params_of_input_grad_norm(model: EnergyModel, batch) -> tuple[float, np.ndarray]:
    """Mean squared input-gradient norm and its exact parameter gradient.

    Reverse mode is run over the input-gradient computation: adjoints flow back
    through the backward pass (picking up second derivatives of the activation
    at each pre-activation), and the pre-activation adjoints collected there are
    then pushed through an ordinary forward-pass backprop.
    """
    x = _as_batch(model, batch)
    n = x.shape[0]
    _, d1, d2 = ACTIVATIONS[model.activation]
    _, zs, hs = _forward(model, x)
    gh, us = _input_backward(model, zs, n)
    value = float(np.mean(np.sum(gh[0] * gh[0], axis=1)))

    L = len(model.weights)
    gW = [np.zeros_like(w) for w in model.weights]
    gb = [np.zeros_like(b) for b in model.biases]
    zbar: list[np.ndarray] = [None] * (L - 1)  # type: ignore[list-item]

    # reverse through gh[l] = us[l] @ W[l],  us[l] = gh[l+1] * a'(z[l])
    gbar = (2.0 / n) * gh[0]
    for l in range(L - 1):
        gW[l] += us[l].T @ gbar
        ubar = gbar @ model.weights[l].T
        zbar[l] = ubar * gh[l + 1] * d2(zs[l])
        gbar = ubar * d1(zs[l])
    # gh[L-1] is W[L-1] broadcast over rows
    gW[L - 1] += gbar.sum(axis=0, keepdims=True)

    # push pre-activation adjoints through the forward pass
    hbar = None
    for l in range(L - 2, -1, -1):
        zb = zbar[l] if hbar is None else zbar[l] + hbar * d1(zs[l])
        gW[l] += zb.T @ hs[l]
        gb[l] += zb.sum(axis=0)
        hbar = zb @ model.weights[l]
    return value, _flatten(gW, gb)


def finite_diff_gradient(fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    if not h > 0:
        raise ValueError("h must be positive")
    p = np.array(point, dtype=np.float64).reshape(-1)
    g = np.empty_like(p)
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = h
        hi, lo = float(fn(p + e)), float(fn(p - e))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"non-finite function value at coordinate {j}")
        g[j] = (hi - lo) / (2.0 * h)
    return g


# --- checkpoints ------------------------------------------------------------

MAGIC = b"ATEBMCKP"
FORMAT_VERSION = 1


def save_checkpoint(model: EnergyModel, path) -> None:
    desc = json.dumps({"sizes": model.sizes, "activation": model.activation},
                      sort_keys=True).encode("utf-8")
    theta = model.get_params().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", theta.size))
        fh.write(theta.tobytes())


def load_checkpoint(path, expect_sizes: Sequence[int] | None = None) -> EnergyModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    off = len(MAGIC)
    version, dlen = struct.unpack_from("<II", raw, off)
    off += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(raw) < off + dlen + 8:
        raise CheckpointError("truncated header")
    try:
        desc = json.loads(raw[off:off + dlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt architecture descriptor: {exc}") from None
    off += dlen
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) != off + 8 * count:
        raise CheckpointError(f"truncated or oversized payload: expected {count} floats")
    sizes = list(desc["sizes"])
    if expect_sizes is not None and list(expect_sizes) != sizes:
        raise CheckpointError(f"architecture mismatch: file {sizes}, expected {list(expect_sizes)}")
    model = init_model(sizes, desc["activation"], rng=0)
    if model.n_params != count:
        raise CheckpointError("parameter count does not match architecture")
    model.set_params(np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64))
    return model
