import math

import numpy as np
import pytest
from scipy.special import expit

from atebm.diffcore import EnergyModel, energy_forward, init_model, load_checkpoint, save_checkpoint
from atebm.distributions import derive_rng, gaussian, sample, uniform_box
from atebm.training import (
    RECORD_COLUMNS,
    MinimaxConfig,
    OptimizerState,
    RunRecord,
    TrainConfig,
    adam_step,
    train_binary_at,
    train_ebm_mle_with_pgd,
    train_minimax_particles,
    train_progressive,
)

REAL = uniform_box((1.0, 1.0), (2.0, 2.0))
FAKE = uniform_box((-2.0, -2.0), (-1.0, -1.0))


def linear_model():
    return EnergyModel([np.zeros((1, 2))], [np.zeros(1)])


def small_model(seed=0):
    return init_model([2, 16, 16, 1], "softplus", np.random.default_rng(seed))


def records_equal(a, b):
    if len(a.rows) != len(b.rows):
        return False
    for ra, rb in zip(a.rows, b.rows):
        for k in ra:
            x, y = ra[k], rb[k]
            if isinstance(x, float) and math.isnan(x) and math.isnan(y):
                continue
            if x != y:
                return False
    return True


# --- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    theta = np.array([1.0, -2.0])
    new, state = adam_step(theta, np.zeros(2), OptimizerState.fresh(2), TrainConfig())
    assert np.array_equal(new, theta) and state.step_count == 1


def test_adam_first_step_unit_gradient():
    cfg = TrainConfig(learning_rate=0.1)
    new, _ = adam_step(np.zeros(1), np.ones(1), OptimizerState.fresh(1), cfg)
    assert abs(new[0] + 0.1 / (1.0 + 1e-8)) < 1e-15


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_adam_fresh_step_is_scale_free(c):
    cfg = TrainConfig(learning_rate=0.01, adam_eps=0.0)
    g = np.array([0.3, -1.2, 2.0])
    a, _ = adam_step(np.zeros(3), g, OptimizerState.fresh(3), cfg)
    b, _ = adam_step(np.zeros(3), c * g, OptimizerState.fresh(3), cfg)
    assert np.array_equal(np.sign(a), np.sign(b))
    assert np.allclose(a, b, rtol=1e-12)


def test_adam_rejects_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), OptimizerState.fresh(2), TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(adam_beta2=1.0),
                                    dict(schedule=[(5, 10), (1, 10)]), dict(schedule=[]),
                                    dict(objective="wgan")])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# --- binary AT ----------------------------------------------------------------

def direct_logistic_regression(cfg, iters):
    """Plain numpy logistic regression with Adam on the trainer's batch stream."""
    rng = derive_rng(cfg.seed, "train-batches")
    theta = np.zeros(3)
    m1 = np.zeros(3)
    v = np.zeros(3)
    js = []
    for t in range(1, iters + 1):
        real = sample(REAL, cfg.batch_size, rng).points
        fake = sample(FAKE, cfg.batch_size, rng).points
        fr = real @ theta[:2] + theta[2]
        ff = fake @ theta[:2] + theta[2]
        js.append(np.mean(-np.logaddexp(0, -fr)) + np.mean(-np.logaddexp(0, ff)))
        xr = np.hstack([real, np.ones((len(real), 1))])
        xf = np.hstack([fake, np.ones((len(fake), 1))])
        g = -(xr.T @ (1 - expit(fr)) / len(fr) - xf.T @ expit(ff) / len(ff))
        m1 = cfg.adam_beta1 * m1 + (1 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
        mh = m1 / (1 - cfg.adam_beta1 ** t)
        vh = v / (1 - cfg.adam_beta2 ** t)
        theta = theta - cfg.learning_rate * mh / (np.sqrt(vh) + cfg.adam_eps)
    return np.array(js), theta


def test_k0_is_logistic_regression_with_monotone_objective():
    cfg = TrainConfig(batch_size=256, learning_rate=0.01, schedule=[(0, 50)], seed=3)
    model, rec = train_binary_at(linear_model(), REAL, FAKE, cfg)
    js, theta = direct_logistic_regression(cfg, 50)
    assert np.allclose(rec.column("objective"), js, rtol=1e-12, atol=1e-12)
    assert np.allclose(model.get_params(), theta, rtol=1e-10, atol=1e-12)
    assert np.all(np.diff(rec.column("objective")) > 0)
    assert np.all(rec.column("displacement") == 0)


def test_binary_at_is_deterministic_and_leaves_input_untouched():
    m0 = small_model()
    before = m0.get_params().copy()
    cfg = TrainConfig(batch_size=32, learning_rate=1e-3, schedule=[(3, 15)], seed=11)
    a_model, a = train_binary_at(m0, gaussian(), uniform_box((-4, -4), (4, 4)), cfg)
    b_model, b = train_binary_at(m0, gaussian(), uniform_box((-4, -4), (4, 4)), cfg)
    assert records_equal(a, b)
    assert np.array_equal(a_model.get_params(), b_model.get_params())
    assert np.array_equal(m0.get_params(), before)
    assert [r["iteration"] for r in a.rows] == list(range(1, 16))


def test_binary_at_requires_single_segment_and_at_objective():
    with pytest.raises(ValueError):
        train_binary_at(small_model(), REAL, FAKE, TrainConfig(schedule=[(1, 2), (2, 2)]))
    with pytest.raises(ValueError):
        train_binary_at(small_model(), REAL, FAKE, TrainConfig(objective="ebm_mle"))


def test_r1_penalty_enters_update_and_record():
    cfg = TrainConfig(batch_size=16, schedule=[(1, 3)], r1_gamma=1.0)
    _, rec = train_binary_at(small_model(), gaussian(), uniform_box((-4, -4), (4, 4)), cfg)
    assert np.all(rec.column("r1") > 0)


# --- progressive --------------------------------------------------------------

def test_degenerate_progressive_equals_binary():
    cfg = TrainConfig(batch_size=16, schedule=[(4, 12)], seed=2)
    p0 = uniform_box((-4, -4), (4, 4))
    a_model, a = train_binary_at(small_model(), gaussian(), p0, cfg)
    b_model, b = train_progressive(small_model(), gaussian(), p0, cfg)
    assert records_equal(a, b)
    assert np.array_equal(a_model.get_params(), b_model.get_params())


def test_progressive_k_column_follows_schedule():
    schedule = [(0, 3), (2, 4), (5, 2)]
    cfg = TrainConfig(batch_size=8, schedule=schedule)
    _, rec = train_progressive(small_model(), gaussian(), uniform_box((-4, -4), (4, 4)), cfg)
    assert list(rec.column("K")) == [0] * 3 + [2] * 4 + [5] * 2
    assert cfg.total_iterations == len(rec.rows) == 9


def test_monitor_called_at_start_cadence_and_end():
    seen = []

    def monitor(it, model):
        seen.append(it)
        return {"probe": float(it)}

    cfg = TrainConfig(batch_size=8, schedule=[(1, 7)])
    _, rec = train_progressive(small_model(), gaussian(), uniform_box((-4, -4), (4, 4)), cfg,
                               monitor=monitor, monitor_every=3)
    assert seen == [0, 3, 6, 7]
    assert [e["probe"] for e in rec.evals] == [0.0, 3.0, 6.0, 7.0]


# --- MLE with PGD ---------------------------------------------------------------

def test_ebm_zero_learning_rate_constant_gap():
    # a constant model has zero gap on any batches and lr=0 keeps it constant
    cfg = TrainConfig(batch_size=16, learning_rate=0.0, schedule=[(2, 10)], objective="ebm_mle")
    model, rec = train_ebm_mle_with_pgd(linear_model(), gaussian(), FAKE, cfg)
    assert np.all(rec.column("gap") == 0.0)
    assert np.array_equal(model.get_params(), np.zeros(3))


def test_ebm_zero_learning_rate_keeps_parameters():
    cfg = TrainConfig(batch_size=16, learning_rate=0.0, schedule=[(2, 5)], objective="ebm_mle")
    m0 = small_model(4)
    model, rec = train_ebm_mle_with_pgd(m0, gaussian(), FAKE, cfg)
    assert np.array_equal(model.get_params(), m0.get_params())
    assert rec.diverged_at is None


def test_divergence_is_recorded_not_raised():
    cfg = TrainConfig(batch_size=16, learning_rate=0.05, schedule=[(1, 500)],
                      objective="ebm_mle", halt_gap=50.0)
    _, rec = train_ebm_mle_with_pgd(small_model(), gaussian(), uniform_box((-4, -4), (4, 4)), cfg)
    assert rec.diverged_at is not None
    assert rec.rows[-1]["status"] == "diverged"
    assert rec.rows[-1]["iteration"] == rec.diverged_at
    assert abs(rec.rows[-1]["gap"]) > 50.0


# --- minimax particles -----------------------------------------------------------

def test_minimax_zero_particle_step_exits_after_one_round():
    cfg = TrainConfig(batch_size=32, learning_rate=1e-3)
    inner = MinimaxConfig(critic_steps=5, particle_step=0.0, max_rounds=50)
    _, particles, rec = train_minimax_particles(small_model(), gaussian(), FAKE, cfg, inner)
    start = sample(FAKE, 32, _minimax_stream(cfg.seed, 32)).points
    assert np.array_equal(particles.points, start)
    assert len(rec.rows) == 1 and rec.rows[0]["displacement"] == 0.0


def _minimax_stream(seed, n):
    rng = derive_rng(seed, "minimax-init")
    sample(gaussian(), n, rng)
    return rng


def test_minimax_particles_move_uphill():
    cfg = TrainConfig(batch_size=64, learning_rate=1e-2)
    inner = MinimaxConfig(critic_steps=10, particle_step=0.05, max_rounds=5)
    model, particles, rec = train_minimax_particles(small_model(), gaussian(), FAKE, cfg, inner)
    assert len(rec.rows) == 5
    assert np.allclose(rec.column("displacement"), 0.05)
    assert particles.source_tag == "generated"
    assert np.mean(np.linalg.norm(particles.points, axis=1)) < np.mean(
        np.linalg.norm(sample(FAKE, 64, _minimax_stream(0, 64)).points, axis=1))


# --- records and checkpoints ------------------------------------------------------

def test_run_record_roundtrip(tmp_path):
    cfg = TrainConfig(batch_size=8, schedule=[(1, 4)])
    _, rec = train_binary_at(small_model(), gaussian(), FAKE, cfg,
                             monitor=lambda it, m: {"mmd": 0.5, "note": None}, monitor_every=2)
    rec.write(tmp_path / "record.tsv")
    rec.write_evals(tmp_path / "evals.tsv")
    back = RunRecord.read(tmp_path / "record.tsv", tmp_path / "evals.tsv")
    assert records_equal(rec, back)
    assert back.evals[0]["mmd"] == 0.5 and "note" not in back.evals[0]
    header = (tmp_path / "record.tsv").read_text().splitlines()[0].split("\t")
    assert tuple(header) == RECORD_COLUMNS


def test_run_record_rejects_non_increasing_rows():
    rec = RunRecord()
    rec.append({"iteration": 2})
    with pytest.raises(ValueError):
        rec.append({"iteration": 2})


def test_trained_checkpoint_roundtrip(tmp_path):
    cfg = TrainConfig(batch_size=8, schedule=[(2, 3)])
    model, _ = train_binary_at(small_model(), gaussian(), FAKE, cfg)
    save_checkpoint(model, tmp_path / "m.ckpt")
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert np.array_equal(energy_forward(load_checkpoint(tmp_path / "m.ckpt"), x),
                          energy_forward(model, x))
