import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from ridepool.errors import ConfigError, InvalidInputError
from ridepool.ingest import SynthConfig, synth_stream
from ridepool.lstm import LstmParams
from ridepool.predictor import (Forecast, LstmPredictor, PerfectPredictor, ScrambledPredictor, YesterdayPredictor,
                                check_counts_grid, make_predictor, materialize, predict, provisional_ids, smape,
                                smape_per_step_total, write_forecast_dump)


def periodic_stream(days=3, steps=8, n=3, seed=0):
    rng = np.random.default_rng(seed)
    rates = rng.integers(0, 3, (steps, n, n)).astype(float)
    for k in range(steps):
        np.fill_diagonal(rates[k], 0)
    return synth_stream(SynthConfig(days=days, base_rates=rates, noise="none", seed=seed))


def one_step_predictions(pred, truth):
    out = []
    for grid in truth:
        out.append(pred.predict(1)[0])
        pred.observe(grid)
    return np.array(out)


def test_perfect_one_step_equals_realised():
    stream = synth_stream(SynthConfig(days=1, base_rates=np.full((20, 3, 3), 0.7) * (1 - np.eye(3)), seed=2))
    counts = stream.counts(3)
    for t in (0, 5, 19):
        fc = predict("perfect", counts, t, 1, oracle_stream=stream)
        assert fc[0].for_step == t + 1
        assert np.array_equal(fc[0].grid, counts[t])


def test_perfect_needs_oracle():
    with pytest.raises(ConfigError):
        predict("perfect", np.zeros((2, 3, 3), dtype=int), 1, 1)


def test_perfect_beyond_stream_is_zero():
    stream = periodic_stream(days=1)
    pred = PerfectPredictor().fit_stream(stream, 3)
    for grid in stream.counts(3):
        pred.observe(grid)
    assert pred.predict(2).sum() == 0


def test_yesterday_day_one_zero_then_exact():
    stream = periodic_stream(days=2)
    counts = stream.counts(3)
    preds = one_step_predictions(YesterdayPredictor(period=8).fit(counts[:0]), counts)
    assert preds[:8].sum() == 0
    assert np.array_equal(preds[8:], counts[8:])
    fc = predict("yesterday", counts, 10, 3, period=8)
    assert [f.for_step for f in fc] == [11, 12, 13]
    assert np.array_equal(np.array([f.grid for f in fc]), counts[10:13])


def test_yesterday_multi_step_uses_fit_history():
    stream = periodic_stream(days=2)
    counts = stream.counts(3)
    pred = YesterdayPredictor(period=8).fit(counts[:8])
    assert np.array_equal(pred.predict(8), counts[8:16])


def test_smape_examples():
    assert smape([1, 2, 3], [1, 2, 3]) == 0.0
    assert smape([3], [1]) == 100.0
    assert smape([0, 2], [0, 2]) == 0.0
    # independent arithmetic: |3-1| / ((3+1)/2) = 1
    assert smape([3], [1]) == 100.0 * abs(3 - 1) / ((3 + 1) / 2)
    with pytest.raises(InvalidInputError):
        smape([1, 2], [1])


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50)), min_size=1, max_size=30))
def test_smape_bounds(pairs):
    p, g = zip(*pairs)
    assert 0.0 <= smape(p, g) <= 200.0


def test_smape_per_step_total_ignores_cell_placement():
    truth = np.array([[[0, 2], [1, 0]]])
    moved = np.array([[[0, 1], [2, 0]]])
    assert smape_per_step_total(moved, truth) == 0.0
    assert smape(moved.ravel(), truth.ravel()) > 0


def test_materialize_counts_and_ids():
    grid = np.zeros((8, 8), dtype=int)
    assert materialize(Forecast(3, grid, 1), provisional_ids(), np.random.default_rng(0)) == []
    grid[2, 7] = 3
    reqs = materialize(Forecast(3, grid, 1), provisional_ids(), np.random.default_rng(0))
    assert len(reqs) == 3
    assert all((r.origin, r.dest, r.arrival, r.provisional) == (2, 7, 3, True) for r in reqs)
    assert [r.id for r in reqs] == [10**9, 10**9 + 1, 10**9 + 2]


@given(st.integers(0, 1000))
def test_materialize_total_and_determinism(seed):
    grid = np.random.default_rng(seed).integers(0, 3, (4, 4))
    np.fill_diagonal(grid, 0)
    fc = Forecast(5, grid, 2)
    a = materialize(fc, provisional_ids(), np.random.default_rng(seed))
    b = materialize(fc, provisional_ids(), np.random.default_rng(seed))
    assert len(a) == grid.sum()
    assert a == b


def test_materialize_uses_known_driver_counts():
    grid = np.array([[0, 3], [1, 0]])
    drivers = np.array([[0, 2], [0, 0]])
    reqs = materialize(Forecast(1, grid, 1, drivers), provisional_ids(), np.random.default_rng(0))
    assert sum(r.is_driver for r in reqs if r.origin == 0) == 2
    assert not any(r.is_driver for r in reqs if r.origin == 1)


def test_perfect_smape_zero_on_random_stream():
    stream = synth_stream(SynthConfig(days=1, base_rates=np.full((30, 4, 4), 0.8) * (1 - np.eye(4)), seed=5))
    counts = stream.counts(4)
    preds = one_step_predictions(PerfectPredictor().fit_stream(stream, 4), counts)
    assert smape(preds.ravel(), counts.ravel()) == 0.0


def test_scrambled_keeps_totals_and_moves_cells():
    stream = periodic_stream(days=1, n=4, seed=1)
    counts = stream.counts(4)
    pred = ScrambledPredictor(PerfectPredictor(), seed=3).fit(counts)
    preds = one_step_predictions(pred, counts)
    assert np.array_equal(preds.sum(axis=(1, 2)), counts.sum(axis=(1, 2)))
    assert np.all(np.einsum("kii->ki", preds) == 0)
    assert not np.array_equal(preds, counts)


def test_estimator_conventions():
    pred = YesterdayPredictor(period=12)
    assert pred.get_params() == {"period": 12}
    assert clone(pred).period == 12
    with pytest.raises(Exception):
        pred.predict(1)   # not fitted
    lstm = LstmPredictor(hidden_dim=4, window=3)
    assert clone(lstm).get_params()["window"] == 3


def test_make_predictor_kinds():
    assert make_predictor("none") is None
    assert isinstance(make_predictor("yesterday", period=5), YesterdayPredictor)
    with pytest.raises(ConfigError):
        make_predictor("lstm")
    with pytest.raises(ConfigError):
        make_predictor("oracle")


def test_lstm_predictor_forecasts_valid_grids():
    params = LstmParams.zeros(9, 2)
    params.c[:] = 1.6
    pred = LstmPredictor(params=params, steps_per_day=8).fit(np.zeros((5, 3, 3), dtype=int))
    grids = pred.predict(2)
    assert grids.shape == (2, 3, 3)
    assert np.all(np.diag(grids[0]) == 0) and grids[0, 0, 1] == 2
    with pytest.raises(ConfigError):
        LstmPredictor(params=LstmParams.zeros(4, 2)).fit(np.zeros((2, 3, 3), dtype=int))


@pytest.mark.parametrize("grid", [[[0, -1], [0, 0]], [[1, 0], [0, 0]], [[0, 0.5], [0, 0]], [0, 1]])
def test_counts_grid_validation(grid):
    with pytest.raises(InvalidInputError):
        check_counts_grid(grid)


def test_forecast_dump(tmp_path):
    p = tmp_path / "dump.csv"
    write_forecast_dump(p, [(1, 0, 1, 2, 3)])
    assert p.read_text().splitlines() == ["step,i,j,predicted,actual", "1,0,1,2,3"]
