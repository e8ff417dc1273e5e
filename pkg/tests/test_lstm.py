import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ridepool.errors import ConfigError, FormatError, InvalidInputError, NumericOverflowError
from ridepool.lstm import (LstmParams, LstmState, TrainConfig, gradient_check, gradient_errors, init_params,
                           load_params, lstm_forward, lstm_loss_grad, round_counts, save_params, train)
from ridepool.predictor import LstmPredictor, check_counts_grid


def scalar_lstm(params, xs):
    """Loop-by-loop re-implementation with python floats only."""
    H, D = params.hidden_dim, params.input_dim
    W, U, b, F, c = (getattr(params, n).tolist() for n in ("W", "U", "b", "F", "c"))
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    h = [0.0] * H
    cell = [0.0] * H
    outs = []
    for x in xs:
        z = [[b[k][j] + sum(W[k][j][d] * x[d] for d in range(D)) + sum(U[k][j][m] * h[m] for m in range(H))
              for j in range(H)] for k in range(4)]
        new_cell = [sig(z[1][j]) * cell[j] + sig(z[0][j]) * math.tanh(z[3][j]) for j in range(H)]
        h = [sig(z[2][j]) * math.tanh(new_cell[j]) for j in range(H)]
        cell = new_cell
        outs.append([max(0.0, c[d] + sum(F[d][j] * h[j] for j in range(H))) for d in range(D)])
    return outs


def test_zero_params_give_zero_state_and_output():
    params = LstmParams.zeros(4, 3)
    state, y = lstm_forward(params, LstmState.zeros(3), np.array([1.0, -2.0, 3.0, 0.5]))
    assert np.all(state.h == 0) and np.all(state.cell == 0) and np.all(y == 0)


def test_relu_clamps_toy_output():
    params = LstmParams.zeros(1, 1)
    params.F[:] = 1.0
    params.c[:] = -1.0
    _, y = lstm_forward(params, LstmState.zeros(1), np.array([0.7]))
    assert y[0] == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_scalar_reimplementation(seed):
    rng = np.random.default_rng(seed)
    params = LstmParams(rng.normal(size=(4, 3, 4)), rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3)),
                        rng.normal(size=(4, 3)), rng.normal(size=4))
    xs = rng.uniform(0, 1, (2, 4))
    state = LstmState.zeros(3)
    for x, expected in zip(xs, scalar_lstm(params, xs)):
        state, y = lstm_forward(params, state, x)
        assert np.allclose(y, expected, rtol=0, atol=1e-12)


def test_forward_dimension_checks():
    params = LstmParams.zeros(4, 3)
    with pytest.raises(InvalidInputError):
        lstm_forward(params, LstmState.zeros(3), np.zeros(5))
    with pytest.raises(InvalidInputError):
        lstm_forward(params, LstmState.zeros(2), np.zeros(4))


def test_perfect_targets_give_zero_loss_and_gradients():
    params = init_params(4, 3, seed=1)
    xs = np.random.default_rng(0).uniform(0, 1, (4, 4))
    state, ys = LstmState.zeros(3), []
    for x in xs:
        state, y = lstm_forward(params, state, x)
        ys.append(y)
    loss, grads = lstm_loss_grad(params, xs, np.array(ys))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_output_layer_gradient_closed_form():
    params = init_params(1, 1, seed=3)
    params.c[:] = 2.0   # keeps the ReLU in its linear region
    x = np.array([[0.4]])
    target = np.array([[0.5]])
    state, y = lstm_forward(params, LstmState.zeros(1), x[0])
    _, grads = lstm_loss_grad(params, x, target)
    assert y[0] > 0
    assert grads["F"][0, 0] == pytest.approx(2 * (y[0] - 0.5) * state.h[0], rel=1e-12)
    assert grads["c"][0] == pytest.approx(2 * (y[0] - 0.5), rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_check_random_instances(seed):
    params = init_params(4, 3, seed=seed)
    assert gradient_check(params, window=3, seed=seed) < 1e-6


def test_gradient_check_zero_params_output_layer():
    params = LstmParams.zeros(3, 2)
    rng = np.random.default_rng(0)
    errs = gradient_errors(params, rng.uniform(0, 1, (2, 3)), rng.uniform(0, 1, (2, 3)))
    assert errs["F"] == 0.0


def test_gradient_check_detects_coarse_epsilon():
    params = init_params(4, 3, seed=0)
    assert gradient_check(params, window=3, epsilon=1e-1) > 1e-3


def test_overflow_reports_step():
    # a diverged output layer: the first step has h = 0 exactly, later ones do not
    params = LstmParams.zeros(2, 2)
    params.W[:] = 1.0
    params.F[:] = 1e200
    xs = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
    with pytest.raises(NumericOverflowError) as info:
        lstm_loss_grad(params, xs, np.ones_like(xs))
    assert info.value.step == 1
    with pytest.raises(InvalidInputError):
        lstm_loss_grad(params, np.array([[np.inf, 0.0]]), np.zeros((1, 2)))


def test_zero_stream_zero_loss_with_zero_output_layer():
    params = init_params(4, 3, seed=0)
    params.F[:] = 0
    params.c[:] = 0
    loss, _ = lstm_loss_grad(params, np.zeros((5, 4)), np.zeros((5, 4)))
    assert loss == 0.0


def constant_history(steps):
    grid = np.array([[0, 3], [2, 0]])
    return grid, np.repeat(grid[None], steps, axis=0)


def test_constant_stream_is_learned():
    grid, hist = constant_history(60)
    cfg = TrainConfig(window=5, epochs=60, batch_size=4, learning_rate=0.02, steps_per_day=20)
    params, curve = train(init_params(4, 4, seed=0), hist[:40], cfg)
    assert curve[-1] < curve[0]
    pred = LstmPredictor(params=params, window=5, steps_per_day=20).fit(hist[:40])
    for g in hist[40:]:
        assert np.array_equal(pred.predict(1)[0], grid)
        pred.observe(g)


def test_training_is_deterministic(tmp_path):
    _, hist = constant_history(40)
    cfg = TrainConfig(window=4, epochs=3, batch_size=2, steps_per_day=20, seed=5)
    a, _ = train(init_params(4, 3, seed=5), hist, cfg)
    b, _ = train(init_params(4, 3, seed=5), hist, cfg)
    save_params(tmp_path / "a.txt", a)
    save_params(tmp_path / "b.txt", b)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    again = load_params(tmp_path / "a.txt")
    assert all(np.array_equal(getattr(again, n), getattr(a, n)) for n in ("W", "U", "b", "F", "c"))
    assert again.scale == a.scale == 3.0


def test_training_needs_two_days():
    _, hist = constant_history(30)
    with pytest.raises(ConfigError):
        train(init_params(4, 2), hist, TrainConfig(steps_per_day=20))


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(FormatError):
        load_params(p)


@given(st.integers(0, 10_000))
def test_outputs_nonnegative_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    params = init_params(4, 3, seed=seed)
    params.c[:] = rng.normal(size=4)
    x = rng.uniform(0, 3, 4)
    _, y1 = lstm_forward(params, LstmState.zeros(3), x)
    _, y2 = lstm_forward(params, LstmState.zeros(3), x)
    assert np.all(y1 >= 0) and np.array_equal(y1, y2)


@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9))
def test_rounding_yields_valid_grid(values):
    grid = round_counts(np.array(values), 3)
    check_counts_grid(grid)
    assert round_counts(np.array([0.5, 1.5, 2.49, -0.5]), 2).tolist() == [[0, 2], [2, 0]]
