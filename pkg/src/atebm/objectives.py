"""Training objectives: logistic AT objective, its closed-form gradient, the
unscaled likelihood-style gradient and the R1 penalty.

All values are reported in the *maximized* sense (``J``, the gap); the trainer
flips the sign before handing gradients to the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .diffcore import (
    EnergyModel,
    energy_forward,
    grad_params,
    grad_params_of_input_grad_norm,
)


@dataclass
class LossReport:
    value: float
    real_term: float
    fake_term: float
    grad: np.ndarray | None
    aux: dict[str, float] = field(default_factory=dict)


def softplus(t):
    return np.logaddexp(0.0, t)


def log_sigmoid(t):
    return -softplus(-t)


def log_one_minus_sigmoid(t):
    return -softplus(t)


def _check(model: EnergyModel, real, fake):
    real = np.asarray(real, dtype=float)
    fake = np.asarray(fake, dtype=float)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")
    return real, fake


def at_loss(model: EnergyModel, real, fake, with_grad: bool = True) -> LossReport:
    """``J = mean log D(real) + mean log(1 - D(fake))`` with ``D = sigmoid(f)``.

    The gradient is obtained by differentiating the two softplus terms with
    respect to each output and back-propagating once through the concatenated
    batch.
    """
    real, fake = _check(model, real, fake)
    fr = energy_forward(model, real)
    ff = energy_forward(model, fake)
    real_term = float(np.mean(log_sigmoid(fr)))
    fake_term = float(np.mean(log_one_minus_sigmoid(ff)))
    grad = None
    if with_grad:
        # d/dt -softplus(-t) = sigmoid(-t);  d/dt -softplus(t) = -sigmoid(t)
        w = np.concatenate([expit(-fr) / fr.size, -expit(ff) / ff.size])
        grad = grad_params(model, np.concatenate([real, fake]), w)
    aux = {
        "mean_sigmoid_real": float(np.mean(expit(fr))),
        "mean_sigmoid_fake": float(np.mean(expit(ff))),
        "gap": float(np.mean(fr) - np.mean(ff)),
    }
    return LossReport(real_term + fake_term, real_term, fake_term, grad, aux)


def at_grad_closed(model: EnergyModel, real, fake) -> np.ndarray:
    """``mean_real (1 - s) grad f - mean_fake s grad f`` with ``s = sigmoid(f)``."""
    real, fake = _check(model, real, fake)
    fr = energy_forward(model, real)
    ff = energy_forward(model, fake)
    g_real = grad_params(model, real, (1.0 - expit(fr)) / fr.size)
    g_fake = grad_params(model, fake, -expit(ff) / ff.size)
    return g_real + g_fake


def ebm_mle_grad(model: EnergyModel, real, fake) -> LossReport:
    """Unscaled contrastive gradient ``mean_real grad f - mean_fake grad f``.

    ``value`` is the gap ``mean f(real) - mean f(fake)`` whose gradient this is.
    """
    real, fake = _check(model, real, fake)
    fr = energy_forward(model, real)
    ff = energy_forward(model, fake)
    g = (grad_params(model, real, np.full(fr.size, 1.0 / fr.size))
         + grad_params(model, fake, np.full(ff.size, -1.0 / ff.size)))
    mr, mf = float(np.mean(fr)), float(np.mean(ff))
    return LossReport(mr - mf, mr, -mf, g, {"gap": mr - mf})


def r1_term(model: EnergyModel, real, gamma: float) -> tuple[float, np.ndarray]:
    """``(gamma/2) * mean ||grad_x f||^2`` over ``real`` and its parameter gradient."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0:
        return 0.0, np.zeros(model.n_params)
    value, grad = grad_params_of_input_grad_norm(model, real)
    return 0.5 * gamma * value, 0.5 * gamma * grad
