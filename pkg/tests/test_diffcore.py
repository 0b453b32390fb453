import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atebm.diffcore import (
    ACTIVATIONS,
    CheckpointError,
    EnergyModel,
    NonFiniteError,
    energy_and_grad_input,
    energy_forward,
    finite_diff_gradient,
    grad_input,
    grad_params,
    grad_params_of_input_grad_norm,
    init_model,
    load_checkpoint,
    save_checkpoint,
)


def linear(w, b=0.0, act="softplus"):
    return EnergyModel([np.array([w], dtype=float)], [np.array([b], dtype=float)], act)


def straight_line_forward(model, x):
    """Scalar-loop evaluation, written without any of the vectorized helpers."""
    out = []
    for row in x:
        h = list(row)
        for l, (w, b) in enumerate(zip(model.weights, model.biases)):
            z = [sum(w[j, k] * h[k] for k in range(len(h))) + b[j] for j in range(w.shape[0])]
            if l == len(model.weights) - 1:
                h = z
            elif model.activation == "softplus":
                h = [max(v, 0.0) + math.log1p(math.exp(-abs(v))) for v in z]
            elif model.activation == "tanh":
                h = [math.tanh(v) for v in z]
            else:
                h = [v / (1.0 + math.exp(-v)) for v in z]
        out.append(h[0])
    return np.array(out)


def rel(a, b):
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


# --- model container -------------------------------------------------------

def test_zero_weights_output_final_bias():
    rng = np.random.default_rng(0)
    m = init_model([2, 5, 5, 1], "tanh", rng)
    for w in m.weights:
        w[:] = 0.0
    for b in m.biases:
        b[:] = 0.0
    m.biases[-1][:] = 0.7
    assert np.all(energy_forward(m, rng.normal(size=(9, 2))) == 0.7)


def test_single_linear_layer_dot_product():
    assert energy_forward(linear([1.0, 2.0]), [[3.0, 4.0]])[0] == 11.0


@pytest.mark.parametrize("act", sorted(ACTIVATIONS))
def test_forward_matches_straight_line_evaluator(act):
    rng = np.random.default_rng(1)
    m = init_model([2, 16, 16, 1], act, rng)
    x = rng.normal(size=(8, 2))
    assert rel(energy_forward(m, x), straight_line_forward(m, x)) < 1e-12


def test_rejects_bad_architectures():
    with pytest.raises(ValueError, match="twice differentiable"):
        EnergyModel([np.ones((1, 2))], [np.zeros(1)], "relu")
    with pytest.raises(ValueError, match="one output"):
        EnergyModel([np.ones((2, 2))], [np.zeros(2)])
    with pytest.raises(ValueError, match="chain"):
        EnergyModel([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)])


def test_forward_rejects_wrong_dim_and_nonfinite():
    m = init_model([2, 4, 1], "softplus", 0)
    with pytest.raises(ValueError):
        energy_forward(m, np.zeros((3, 5)))
    with pytest.raises(NonFiniteError):
        energy_forward(m, [[np.nan, 0.0]])


def test_param_roundtrip_and_order():
    m = init_model([3, 4, 1], "swish", 0)
    theta = m.get_params()
    assert theta.size == m.n_params == 3 * 4 + 4 + 4 + 1
    # layer-major, W row-major before b
    assert np.array_equal(theta[:12], m.weights[0].ravel())
    assert np.array_equal(theta[12:16], m.biases[0])
    m2 = m.with_params(theta * 2)
    assert np.array_equal(m2.get_params(), theta * 2)
    assert np.array_equal(m.get_params(), theta)
    with pytest.raises(ValueError):
        m.set_params(theta[:-1])


def test_init_is_seeded_he_normal():
    a = init_model([2, 64, 64, 1], "softplus", np.random.default_rng(5))
    b = init_model([2, 64, 64, 1], "softplus", np.random.default_rng(5))
    assert np.array_equal(a.get_params(), b.get_params())
    assert all(np.all(bias == 0) for bias in a.biases)
    assert abs(np.var(a.weights[1]) - 2.0 / 64) < 0.005


def test_single_row_equals_batched_row():
    rng = np.random.default_rng(3)
    m = init_model([2, 32, 32, 1], "softplus", rng)
    x = rng.normal(size=(20, 2))
    batched = energy_forward(m, x)
    assert all(energy_forward(m, x[i])[0] == batched[i] for i in range(20))


# --- first-order gradients -------------------------------------------------

def test_grad_input_linear():
    g = grad_input(linear([3.0, 4.0]), np.random.default_rng(0).normal(size=(5, 2)))
    assert np.array_equal(g, np.tile([3.0, 4.0], (5, 1)))


def test_grad_input_single_softplus_unit():
    # f(x) = softplus(w.x): a hidden unit with unit output weight
    m = EnergyModel([np.array([[1.0, 0.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    assert np.allclose(grad_input(m, [[0.0, 0.0]]), [[0.5, 0.0]], atol=1e-15)


@pytest.mark.parametrize("act", sorted(ACTIVATIONS))
def test_grad_input_matches_finite_differences(act):
    rng = np.random.default_rng(4)
    m = init_model([3, 10, 10, 1], act, rng)
    x = rng.normal(size=(6, 3))
    fd = np.stack([finite_diff_gradient(lambda z: energy_forward(m, z[None])[0], r, 1e-5) for r in x])
    assert np.max(np.abs(grad_input(m, x) - fd)) < 1e-6
    e, g = energy_and_grad_input(m, x)
    assert np.array_equal(e, energy_forward(m, x)) and np.array_equal(g, grad_input(m, x))


def test_grad_params_zero_weights_and_additivity():
    rng = np.random.default_rng(6)
    m = init_model([2, 8, 1], "tanh", rng)
    x = rng.normal(size=(4, 2))
    assert np.all(grad_params(m, x, np.zeros(4)) == 0)
    pos = grad_params(m, x[:1], [1.0])
    neg = grad_params(m, x[:1], [-1.0])
    assert np.all(pos + neg == 0)


@pytest.mark.parametrize("act", sorted(ACTIVATIONS))
def test_grad_params_matches_finite_differences(act):
    rng = np.random.default_rng(7)
    m = init_model([2, 7, 5, 1], act, rng)
    x = rng.normal(size=(5, 2))
    w = rng.normal(size=5)
    fd = finite_diff_gradient(lambda p: float(w @ energy_forward(m.with_params(p), x)), m.get_params())
    assert rel(grad_params(m, x, w), fd) < 1e-5


def test_grad_params_rejects_mismatched_weights():
    m = init_model([2, 3, 1], "tanh", 0)
    with pytest.raises(ValueError):
        grad_params(m, np.zeros((4, 2)), np.ones(3))


# --- second order ----------------------------------------------------------

def test_input_grad_norm_linear_closed_form():
    v, g = grad_params_of_input_grad_norm(linear([3.0, 4.0], 1.5), np.ones((3, 2)))
    assert v == 25.0
    assert np.array_equal(g, [6.0, 8.0, 0.0])


@pytest.mark.parametrize("act", sorted(ACTIVATIONS))
def test_input_grad_norm_scalar_consistent(act):
    rng = np.random.default_rng(8)
    m = init_model([2, 9, 9, 1], act, rng)
    x = rng.normal(size=(7, 2))
    v, _ = grad_params_of_input_grad_norm(m, x)
    assert abs(v - np.mean(np.sum(grad_input(m, x) ** 2, axis=1))) < 1e-12


@pytest.mark.parametrize("act", sorted(ACTIVATIONS))
def test_input_grad_norm_param_gradient_matches_fd(act):
    rng = np.random.default_rng(9)
    m = init_model([2, 6, 6, 1], act, rng)
    x = rng.normal(size=(5, 2))
    fd = finite_diff_gradient(lambda p: grad_params_of_input_grad_norm(m.with_params(p), x)[0],
                              m.get_params(), 1e-4)
    assert rel(grad_params_of_input_grad_norm(m, x)[1], fd) < 1e-4


# --- finite differences ----------------------------------------------------

def test_finite_diff_known_cases():
    assert np.allclose(finite_diff_gradient(lambda v: v @ v, [1.0, 2.0]), [2.0, 4.0], atol=1e-8)
    assert np.all(finite_diff_gradient(lambda v: 3.0, [1.0, 2.0, 3.0]) == 0)
    g = finite_diff_gradient(lambda v: math.sin(v[0]), [0.0, 5.0])
    assert abs(g[0] - 1.0) < 1e-8 and g[1] == 0


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda v: 0.0, [0.0], h=0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(sorted(ACTIVATIONS)))
def test_grad_params_linear_in_out_weights(seed, act):
    rng = np.random.default_rng(seed)
    m = init_model([2, 5, 1], act, rng)
    x = rng.normal(size=(4, 2))
    a, b = rng.normal(size=4), rng.normal(size=4)
    lhs = grad_params(m, x, a + 2.0 * b)
    rhs = grad_params(m, x, a) + 2.0 * grad_params(m, x, b)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip_bytes_and_energies(tmp_path):
    rng = np.random.default_rng(10)
    m = init_model([2, 16, 16, 1], "swish", rng)
    x = rng.normal(size=(11, 2))
    save_checkpoint(m, tmp_path / "a.ckpt")
    m2 = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(m2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert np.array_equal(energy_forward(m, x), energy_forward(m2, x))
    assert m2.activation == "swish"


def test_checkpoint_corruption_detected(tmp_path):
    m = init_model([2, 4, 1], "tanh", 0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    raw = p.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "version.ckpt").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "version.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(p, expect_sizes=[2, 8, 1])
