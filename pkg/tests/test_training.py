import numpy as np
import pytest

from synthetic import PATHS, synthetic_rows
from trusslaw.dataset import RECORD_DTYPE
from trusslaw.design import seed_cells
from trusslaw.hypernet import HypernetArch, Hypernetwork
from trusslaw.kinematics import green_lagrange
from trusslaw.training import (AdamState, DesignData, LossModel, TrainConfig, TrainingError,
                               adam_step, finite_difference_check, normalized_batch, train)

MINI = HypernetArch(trunk=(8,), head_hidden=(8,), icnn_hidden=(4, 4, 4))


def graphs():
    return dict(enumerate(seed_cells().values()))


def params_of(hn):
    return np.concatenate([hn.theta, hn.biases])


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(7)
    hn = Hypernetwork.initialize(MINI, rng)
    hn.theta = hn.theta + 0.3 * rng.standard_normal(hn.theta.size)
    hn.biases = 0.1 * rng.standard_normal(hn.biases.size)
    gs = graphs()
    data = DesignData.from_rows(synthetic_rows(hn, gs), gs)
    return hn, gs, data, LossModel(MINI)


def test_zero_loss_at_interpolation(setup):
    hn, _, data, model = setup
    batch = normalized_batch(data, np.arange(data.n_designs), data.n_designs, 1.0)
    value, ls, lw, g = model.value_and_grad(params_of(hn), batch, (1.0, 0.2))
    assert value <= 1e-24 and ls <= 1e-24 and lw <= 1e-24
    assert np.max(np.abs(g)) <= 1e-10


def test_loss_linear_in_weights(setup):
    hn, _, data, model = setup
    rng = np.random.default_rng(1)
    p = params_of(hn) + 0.05 * rng.standard_normal(len(params_of(hn)))
    batch = normalized_batch(data, np.arange(data.n_designs), data.n_designs, 1.0)
    _, ls, lw = model.loss(p, batch, (1.0, 0.0))
    v, _, _ = model.loss(p, batch, (0.7, 3.0))
    assert v == pytest.approx(0.7 * ls + 3.0 * lw, rel=1e-13)


def test_single_record_by_hand(setup):
    hn, gs, _, model = setup
    other = Hypernetwork(MINI, hn.theta * 0.9, hn.biases + 0.05)
    rows = synthetic_rows(hn, {0: gs[0]}, [PATHS[0]])[2:3]
    data = DesignData.from_rows(rows, {0: gs[0]})
    batch = normalized_batch(data, [0], 1, 1.0)
    value, _, _ = model.loss(params_of(other), batch, (1.0, 0.2))
    law = other.predict_model(gs[0])
    E = green_lagrange(rows[0]["F"].reshape(3, 3))
    dS = law.stress(E) - hn.predict_model(gs[0]).stress(E)
    dW = law.energy_E(E) - rows[0]["W"]
    assert value == pytest.approx(np.sum(dS**2) + 0.2 * dW**2, rel=1e-10)


def test_gradient_matches_fd(setup):
    hn, _, data, model = setup
    rng = np.random.default_rng(2)
    p = params_of(hn) + 0.1 * rng.standard_normal(len(params_of(hn)))
    batch = normalized_batch(data, np.arange(data.n_designs), data.n_designs, 1.0)
    _, a, n = finite_difference_check(model, p, batch, (1.0, 0.2), 40, rng)
    assert np.linalg.norm(a - n) <= 1e-5 * np.linalg.norm(a)


def test_adam_first_step_by_hand():
    cfg = TrainConfig(learning_rate=0.1)
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 0.0])
    st = AdamState.zeros(3)
    out = adam_step(p, g, st, cfg)
    expected = p - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(out, expected, rtol=0, atol=1e-15)
    assert st.t == 1
    out2 = adam_step(out, g, st, cfg)
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    mh, vh = m / (1 - 0.81), v / (1 - 0.999**2)
    assert np.allclose(out2, out - 0.1 * mh / (np.sqrt(vh) + 1e-8), rtol=0, atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_S=0.0, lambda_W=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def _target_data():
    rng = np.random.default_rng(11)
    hn = Hypernetwork.initialize(MINI, rng)
    hn.theta = hn.theta + 0.3 * rng.standard_normal(hn.theta.size)
    gs = graphs()
    return DesignData.from_rows(synthetic_rows(hn, gs), gs)


def test_training_is_deterministic_and_descends():
    data = _target_data()
    cfg = TrainConfig(learning_rate=1e-2, batch_size=2, epochs=3, seed=5)
    a = train(data, cfg, MINI)
    b = train(data, cfg, MINI)
    assert np.array_equal(a.model.theta, b.model.theta)
    assert np.array_equal(a.model.biases, b.model.biases)
    assert [s[:5] for s in a.steps] == [s[:5] for s in b.steps]
    assert a.epochs[0][1] < a.initial_loss
    assert a.epochs[-1][1] < a.epochs[0][1]


def test_nan_guard_reports_and_checkpoints():
    data = _target_data()
    rng = np.random.default_rng(0)
    bad = Hypernetwork.initialize(MINI, rng)
    bad.theta[0] = np.nan
    saved = []
    with pytest.raises(TrainingError, match="trunk"):
        train(data, TrainConfig(epochs=1), MINI, checkpoint=lambda e, m: saved.append(e), init=bad)
    assert saved == [1]


def test_unconverged_records_rejected(setup):
    hn, gs, _, _ = setup
    rows = synthetic_rows(hn, {0: gs[0]}, [PATHS[0]])
    rows["flags"][1] = 0
    with pytest.raises(TrainingError):
        DesignData.from_rows(rows, gs)
    rows = synthetic_rows(hn, {0: gs[0]}, [PATHS[0]])
    rows["S"][0, 0] = np.nan
    with pytest.raises(TrainingError):
        DesignData.from_rows(rows, gs)


def test_empty_training_data():
    data = DesignData.from_rows(np.zeros(0, dtype=RECORD_DTYPE), {})
    with pytest.raises(TrainingError):
        train(data, TrainConfig(epochs=1), MINI)
