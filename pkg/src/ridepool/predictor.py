"""Request predictors, materialisation of forecasts and SMAPE scoring.

Predictors follow the scikit-learn estimator conventions: hyperparameters
are constructor arguments (so ``get_params``/``set_params``/``clone`` work),
``fit`` consumes a history of count grids and returns ``self``, and learned
state lives in attributes with a trailing underscore.  On top of that they
are online: ``observe`` appends the realised grid of the step that just
happened and ``predict(f)`` forecasts the next ``f`` steps.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, InvalidInputError
from .ingest import RequestStream
from .lstm import LstmParams, LstmState, TrainConfig, init_params, lstm_forward, round_counts, train
from .model import DEFAULT_MAX_WAIT, Request

PROVISIONAL_ID_BASE = 10**9
KINDS = ("none", "perfect", "yesterday", "lstm", "scrambled")


def check_counts_grid(grid, n: int | None = None) -> np.ndarray:
    """Validate one ``n x n`` count grid (nonnegative integers, zero diagonal)."""
    arr = np.asarray(grid)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"count grid must be square, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise InvalidInputError(f"count grid covers {arr.shape[0]} zones, expected {n}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise InvalidInputError("count grid entries must be integers")
        arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise InvalidInputError("count grid entries must be >= 0")
    if np.any(np.diag(arr) != 0):
        raise InvalidInputError("count grid diagonal must be zero")
    return arr


def check_history(history) -> np.ndarray:
    """Validate a ``(T, n, n)`` stack of count grids (``T`` may be 0)."""
    arr = np.asarray(history)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise InvalidInputError(f"history must have shape (T, n, n), got {arr.shape}")
    for grid in arr:
        check_counts_grid(grid)
    return arr.astype(np.int64)


@dataclass(frozen=True)
class Forecast:
    for_step: int
    grid: np.ndarray
    horizon_used: int
    drivers: np.ndarray | None = None

    @property
    def total(self) -> int:
        return int(self.grid.sum())


class BasePredictor(BaseEstimator):
    """Common online bookkeeping: the number of observed steps and zone count."""

    def _start(self, n: int):
        self.n_zones_ = n
        self.t_ = 0

    def observe(self, grid) -> "BasePredictor":
        check_is_fitted(self, "t_")
        self._observe(check_counts_grid(grid, self.n_zones_))
        self.t_ += 1
        return self

    def _observe(self, grid):
        pass

    def predict(self, f: int = 1) -> np.ndarray:
        """Integer count grids for the next ``f`` steps, shape ``(f, n, n)``."""
        check_is_fitted(self, "t_")
        if f < 1:
            raise InvalidInputError(f"horizon must be >= 1, got {f}")
        return self._predict(f)

    def predict_drivers(self, f: int = 1) -> np.ndarray | None:
        """Driver counts for the next ``f`` steps, when the predictor knows them."""
        return None

    def forecasts(self, f: int) -> list[Forecast]:
        grids = self.predict(f)
        drivers = self.predict_drivers(f)
        return [Forecast(self.t_ + k + 1, grids[k], f, None if drivers is None else drivers[k])
                for k in range(f)]


class PerfectPredictor(BasePredictor):
    """Returns the realised future counts of an oracle stream."""

    def fit(self, X, y=None, drivers=None):
        """``X`` is the oracle: the ``(T, n, n)`` counts of the stream to be simulated."""
        X = check_history(X)
        self.oracle_ = X
        self.oracle_drivers_ = None if drivers is None else check_history(drivers)
        self._start(X.shape[1])
        return self

    def fit_stream(self, stream: RequestStream, n: int | None = None) -> "PerfectPredictor":
        n = n or stream.zone_count()
        return self.fit(stream.counts(n), drivers=stream.driver_counts(n))

    def _window(self, arr, f):
        out = np.zeros((f, self.n_zones_, self.n_zones_), dtype=np.int64)
        lo = self.t_
        hi = min(lo + f, len(arr))
        if hi > lo:
            out[: hi - lo] = arr[lo:hi]
        return out

    def _predict(self, f):
        return self._window(self.oracle_, f)

    def predict_drivers(self, f=1):
        if self.oracle_drivers_ is None:
            return None
        return self._window(self.oracle_drivers_, f)


class YesterdayPredictor(BasePredictor):
    """Replicates the counts observed one day (``period`` steps) earlier."""

    def __init__(self, period: int = 1440):
        self.period = period

    def fit(self, X, y=None):
        """``X``: counts of the days preceding the simulated stream (may be empty)."""
        X = check_history(X)
        self.history_ = list(X[-self.period:]) if len(X) else []
        self.offset_ = len(self.history_)
        self._start(X.shape[1])
        return self

    def _observe(self, grid):
        self.history_.append(grid)
        if len(self.history_) > 2 * self.period:
            del self.history_[: len(self.history_) - self.period]

    def _predict(self, f):
        n = self.n_zones_
        out = np.zeros((f, n, n), dtype=np.int64)
        size = len(self.history_)
        for k in range(f):
            # the step being forecast sits at index size + k of the buffer
            idx = size + k - self.period
            if 0 <= idx < size:
                out[k] = self.history_[idx]
        return out


class LstmPredictor(BasePredictor):
    """Recurrent forecaster: one network step per observed simulation step.

    Pass ``params`` to use a pretrained network; otherwise ``fit`` trains one
    on the given history.  Multi-step forecasts feed the network its own
    unrounded output.
    """

    def __init__(self, params: LstmParams | None = None, hidden_dim: int | None = None,
                 window: int = 30, learning_rate: float = 1e-2, epochs: int = 20, batch_size: int = 8,
                 steps_per_day: int = 1440, warmup: int | None = None, seed: int = 0):
        self.params = params
        self.hidden_dim = hidden_dim
        self.window = window
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.steps_per_day = steps_per_day
        self.warmup = warmup
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(window=self.window, learning_rate=self.learning_rate, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, steps_per_day=self.steps_per_day)

    def fit(self, X, y=None):
        X = check_history(X)
        n = X.shape[1]
        if self.params is None:
            start = init_params(n * n, self.hidden_dim or n * n, seed=self.seed)
            self.params_, self.loss_curve_ = train(start, X, self.train_config())
        else:
            if self.params.input_dim != n * n:
                raise ConfigError(f"network expects {self.params.input_dim} cells, history has {n * n}")
            self.params_ = self.params
            self.loss_curve_ = []
        self._start(n)
        self.state_ = LstmState.zeros(self.params_.hidden_dim)
        self.last_ = np.zeros(n * n)
        warm = self.window if self.warmup is None else self.warmup
        for grid in X[len(X) - warm:] if warm else []:
            self._observe(grid)
        return self

    def _observe(self, grid):
        x = grid.reshape(-1) / self.params_.scale
        self.state_, self.last_ = lstm_forward(self.params_, self.state_, x)

    def raw_forecast(self, f: int) -> np.ndarray:
        """Unrounded forecasts in count units, shape ``(f, n*n)``."""
        outs = [self.last_]
        state = self.state_
        for _ in range(f - 1):
            state, y = lstm_forward(self.params_, state, outs[-1])
            outs.append(y)
        return np.array(outs) * self.params_.scale

    def _predict(self, f):
        return np.array([round_counts(y, self.n_zones_) for y in self.raw_forecast(f)])


class ScrambledPredictor(BasePredictor):
    """Wraps a predictor and permutes its origin-destination cells.

    Per-step totals are untouched, so the predictor looks perfect to any
    cell-permutation-insensitive score while being wrong about where the
    demand is.
    """

    def __init__(self, base: BasePredictor | None = None, seed: int = 0):
        self.base = base
        self.seed = seed

    def fit(self, X, y=None, **kwargs):
        X = check_history(X)
        base = self.base if self.base is not None else PerfectPredictor()
        self.base_ = base.fit(X, **kwargs)
        n = X.shape[1]
        off = [k for k in range(n * n) if k // n != k % n]
        perm = np.random.default_rng(self.seed).permutation(off)
        self.perm_ = np.arange(n * n)
        self.perm_[off] = perm
        self._start(n)
        return self

    def _observe(self, grid):
        self.base_.observe(grid)

    def _predict(self, f):
        grids = self.base_.predict(f).reshape(f, -1)
        out = np.zeros_like(grids)
        out[:, self.perm_] = grids
        return out.reshape(f, self.n_zones_, self.n_zones_)


def make_predictor(kind: str, *, period: int = 1440, params: LstmParams | None = None,
                   seed: int = 0) -> BasePredictor | None:
    if kind == "none":
        return None
    if kind == "perfect":
        return PerfectPredictor()
    if kind == "yesterday":
        return YesterdayPredictor(period=period)
    if kind == "lstm":
        if params is None:
            raise ConfigError("the lstm predictor needs a trained parameter file")
        return LstmPredictor(params=params, steps_per_day=period)
    if kind == "scrambled":
        return ScrambledPredictor(PerfectPredictor(), seed=seed)
    raise ConfigError(f"unknown predictor kind {kind!r}; expected one of {KINDS}")


def fit_predictor(predictor: BasePredictor, day: RequestStream, history: np.ndarray) -> BasePredictor:
    """Fit a predictor for a run over ``day`` given the counts of the preceding days."""
    n = history.shape[1]
    if isinstance(predictor, PerfectPredictor):
        return predictor.fit_stream(day, n)
    if isinstance(predictor, ScrambledPredictor) and (
            predictor.base is None or isinstance(predictor.base, PerfectPredictor)):
        return predictor.fit(day.counts(n))
    return predictor.fit(history)


def predict(kind: str, history, t: int, f: int, oracle_stream: RequestStream | None = None,
            period: int = 1440, params: LstmParams | None = None) -> list[Forecast]:
    """Forecasts for steps ``t+1 .. t+f`` given realised counts of steps ``1 .. t``.

    ``history`` holds at least ``t`` grids; only the first ``t`` are used.
    """
    history = check_history(history)[:t]
    n = history.shape[1]
    if kind == "perfect":
        if oracle_stream is None:
            raise ConfigError("the perfect predictor needs an oracle stream")
        pred = PerfectPredictor().fit_stream(oracle_stream, n)
        for grid in history:
            pred.observe(grid)
        return pred.forecasts(f)
    pred = make_predictor(kind, period=period, params=params)
    if pred is None:
        raise ConfigError("kind 'none' produces no forecasts")
    pred.fit(history[:0])
    for grid in history:
        pred.observe(grid)
    return pred.forecasts(f)


def materialize(forecast: Forecast, id_source: Iterable[int], rng: np.random.Generator,
                driver_prob: float = 0.5, max_wait: int = DEFAULT_MAX_WAIT) -> list[Request]:
    """Turn a forecast grid into provisional requests arriving at ``forecast.for_step``.

    Driver flags come from ``forecast.drivers`` when present, otherwise they
    are drawn with probability ``driver_prob``.
    """
    grid = forecast.grid
    cells = np.argwhere(grid > 0)
    total = int(grid.sum())
    if total == 0:
        return []
    ids = iter(id_source)
    flags = None if forecast.drivers is not None else rng.random(total) < driver_prob
    out = []
    f = 0
    for i, j in cells:
        count = int(grid[i, j])
        n_drivers = None if forecast.drivers is None else min(int(forecast.drivers[i, j]), count)
        for k in range(count):
            is_driver = (k < n_drivers) if n_drivers is not None else bool(flags[f])
            out.append(Request(next(ids), int(i), int(j), bool(is_driver), max_wait,
                               forecast.for_step, provisional=True))
            f += 1
    return out


def provisional_ids(start: int = PROVISIONAL_ID_BASE):
    return itertools.count(start)


def smape_terms(predicted, truth) -> np.ndarray:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    g = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise InvalidInputError(f"length mismatch: {p.size} predictions vs {g.size} ground truths")
    if p.size == 0:
        raise InvalidInputError("smape needs at least one value")
    if np.any(p < 0) or np.any(g < 0):
        raise InvalidInputError("smape inputs must be >= 0")
    denom = (p + g) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(denom == 0, 0.0, np.abs(p - g) / np.where(denom == 0, 1.0, denom))
    return terms


def smape(predicted: Sequence[float], truth: Sequence[float]) -> float:
    """Symmetric mean absolute percentage error in percent; 0/0 terms count as 0."""
    terms = smape_terms(predicted, truth)
    return 100.0 * math.fsum(terms) / terms.size


def smape_per_step_total(predicted_grids, truth_grids) -> float:
    """SMAPE over per-step demand totals (insensitive to where the demand is)."""
    p = np.asarray(predicted_grids).reshape(len(predicted_grids), -1).sum(axis=1)
    g = np.asarray(truth_grids).reshape(len(truth_grids), -1).sum(axis=1)
    return smape(p, g)


def write_forecast_dump(path, rows: Iterable[tuple[int, int, int, int, int]]) -> None:
    """CSV ``step,i,j,predicted,actual`` for accuracy audits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "i", "j", "predicted", "actual"])
        for row in rows:
            w.writerow(row)
