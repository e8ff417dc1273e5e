"""Multi-run harness: per-day baselines vs forecast-assisted runs, and accuracy reports.

Every run here is a pure function of its arguments, so runs can be farmed
out to worker processes and the merged tables do not depend on the order
in which workers finish.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .city import ZoneMap
from .engine import RunReport, SimConfig, compare_runs, run
from .errors import ConfigError
from .ingest import RequestStream, SynthConfig, synth_stream
from .lstm import LstmParams
from .predictor import (BasePredictor, LstmPredictor, PerfectPredictor, ScrambledPredictor, YesterdayPredictor,
                        fit_predictor, make_predictor, smape, smape_per_step_total)

logger = logging.getLogger(__name__)

WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


@dataclass(frozen=True)
class Treatment:
    kind: str
    f: int

    @property
    def label(self) -> str:
        return f"{self.kind}_f{self.f}"


@dataclass(frozen=True)
class DayResult:
    day: int
    seed: int
    label: str
    total_reward: float
    average_pool_size: float
    smape: float | None
    smape_totals: float | None
    served_fraction: float


def history_before(stream: RequestStream, day: int, n: int) -> np.ndarray:
    """Counts of every step before ``day``, shape ``(day * steps_per_day, n, n)``."""
    hi = min(day * stream.steps_per_day, stream.horizon)
    out = np.zeros((hi, n, n), dtype=np.int64)
    for k in range(hi):
        for r in stream.per_step[k]:
            out[k, r.origin, r.dest] += 1
    return out


def build_predictor(kind: str, stream: RequestStream, day: int, n: int, params: LstmParams | None = None,
                    seed: int = 0) -> BasePredictor | None:
    """A predictor fitted for a run over ``stream.day(day)``; ``None`` for kind ``none``."""
    pred = make_predictor(kind, period=stream.steps_per_day, params=params, seed=seed)
    if pred is None:
        return None
    return fit_predictor(pred, stream.day(day), history_before(stream, day, n))


def run_day(stream: RequestStream, day: int, zones: ZoneMap, cfg: SimConfig, kind: str = "none",
            params: LstmParams | None = None) -> RunReport:
    n = zones.n
    pred = build_predictor(kind, stream, day, n, params, seed=cfg.seed) if cfg.f > 0 else None
    label = "baseline" if cfg.f == 0 else f"{kind}_f{cfg.f}"
    return run(stream.day(day), cfg, zones, pred, label=label)


def _run_job(job) -> DayResult:
    stream, day, zones, cfg, kind, params = job
    rep = run_day(stream, day, zones, cfg, kind, params)
    return DayResult(day, cfg.seed, rep.label, rep.total_reward, rep.average_pool_size, rep.smape,
                     rep.smape_totals, rep.served_fraction)


def sweep(stream: RequestStream, zones: ZoneMap, treatments: Sequence[Treatment], base: SimConfig,
          seeds: Sequence[int] = (0,), jobs: int = 1, params: LstmParams | None = None,
          days: Sequence[int] | None = None) -> list[DayResult]:
    """One baseline (f=0) and one run per treatment for every (day, seed).

    Results come back sorted by (day, seed, label) whatever ``jobs`` is.
    """
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    for tr in treatments:
        if tr.kind == "lstm" and params is None:
            raise ConfigError("the lstm predictor needs a trained parameter file")
        if tr.kind == "none" or tr.f < 1:
            raise ConfigError(f"treatment {tr.label} must use a predictor and f >= 1")
    days = range(stream.n_days) if days is None else days
    job_list = []
    for d in days:
        for s in seeds:
            job_list.append((stream, d, zones, replace(base, f=0, seed=s), "none", None))
            for tr in treatments:
                job_list.append((stream, d, zones, replace(base, f=tr.f, predictor=tr.kind, seed=s), tr.kind,
                                 params if tr.kind == "lstm" else None))
    if jobs > 1 and len(job_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_job, job_list))
    else:
        results = [_run_job(j) for j in job_list]
    return sorted(results, key=lambda r: (r.day, r.seed, r.label))


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return repr(float(x))


def improvement(baseline: float, treatment: float) -> float | None:
    if baseline == 0:
        return None
    return 100.0 * (treatment - baseline) / abs(baseline)


def sweep_tables(stream: RequestStream, results: Sequence[DayResult], treatments: Sequence[Treatment]):
    """Rows of the improvement, pool-size and SMAPE tables, one per (day, seed)."""
    by_key: dict[tuple[int, int], dict[str, DayResult]] = {}
    for r in results:
        by_key.setdefault((r.day, r.seed), {})[r.label] = r
    labels = [t.label for t in treatments]
    head = ["day", "date", "weekday", "weekend", "seed"]
    imp = [head + [f"improvement_{lb}" for lb in labels]]
    pool = [head + ["pool_baseline"] + [f"pool_{lb}" for lb in labels]]
    acc = [head + [c for lb in labels for c in (f"smape_cell_{lb}", f"smape_total_{lb}")]]
    for (d, s), row in sorted(by_key.items()):
        date = stream.date_of(d)
        key = [d, date.isoformat(), WEEKDAYS[date.weekday()], int(date.weekday() >= 5), s]
        base = row["baseline"]
        imp.append(key + [_fmt(improvement(base.total_reward, row[lb].total_reward)) for lb in labels])
        pool.append(key + [_fmt(base.average_pool_size)] + [_fmt(row[lb].average_pool_size) for lb in labels])
        acc.append(key + [v for lb in labels for v in (_fmt(row[lb].smape), _fmt(row[lb].smape_totals))])
    return imp, pool, acc


def write_rows(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def mean_improvements(results: Sequence[DayResult]) -> dict[str, float]:
    """Mean improvement over (day, seed) pairs, per treatment label."""
    base = {(r.day, r.seed): r.total_reward for r in results if r.label == "baseline"}
    acc: dict[str, list[float]] = {}
    for r in results:
        if r.label == "baseline":
            continue
        v = improvement(base[(r.day, r.seed)], r.total_reward)
        if v is not None:
            acc.setdefault(r.label, []).append(v)
    return {k: math.fsum(v) / len(v) for k, v in acc.items()}


def one_step_accuracy(pred: BasePredictor, truth: np.ndarray) -> tuple[float, float]:
    """Cell-level and per-step-total SMAPE of one-step-ahead forecasts over ``truth``."""
    preds = np.empty_like(truth)
    for k, grid in enumerate(truth):
        preds[k] = pred.predict(1)[0]
        pred.observe(grid)
    return smape(preds.ravel(), truth.ravel()), smape_per_step_total(preds, truth)


def held_out_smape(params: LstmParams, train_part: np.ndarray, held_out: np.ndarray, window: int = 30,
                   steps_per_day: int = 1440) -> tuple[float, float]:
    pred = LstmPredictor(params=params, window=window, steps_per_day=steps_per_day).fit(train_part)
    return one_step_accuracy(pred, held_out)


def repeated_day_stream(rates: np.ndarray, days: int, seed: int = 0, **kwargs) -> RequestStream:
    """One Poisson day drawn from ``rates``, then replayed exactly on every following day.

    Yesterday's counts are then a perfect forecast from day 2 on, while the
    demand itself is as irregular as a sampled day.
    """
    first = synth_stream(SynthConfig(days=1, base_rates=rates, seed=seed, **kwargs))
    counts = first.counts(np.asarray(rates).shape[1]).astype(float)
    return synth_stream(SynthConfig(days=days, base_rates=counts, noise="none", seed=seed, **kwargs))


@dataclass(frozen=True)
class PredictorScore:
    kind: str
    smape_cell: float
    smape_total: float
    improvement: float | None


def decoupling_report(stream: RequestStream, zones: ZoneMap, cfg: SimConfig, day: int = 1,
                      scramble_seed: int = 0) -> list[PredictorScore]:
    """Accuracy and reward benefit side by side for the yesterday and scrambled-perfect predictors.

    The scrambled predictor has exact per-step totals but puts the demand in
    the wrong cells, so total-based accuracy ranks it as perfect while the
    optimiser gets misleading origins and destinations.
    """
    if day < 1:
        raise ConfigError("the yesterday predictor needs a previous day; use day >= 1")
    n = zones.n
    history = history_before(stream, day, n)
    truth = history_before(stream, day + 1, n)[len(history):]
    base = run_day(stream, day, zones, replace(cfg, f=0))
    out = []
    for kind, make in (("yesterday", lambda: YesterdayPredictor(period=stream.steps_per_day)),
                       ("scrambled", lambda: ScrambledPredictor(PerfectPredictor(), seed=scramble_seed))):
        acc_pred = fit_predictor(make(), stream.day(day), history)
        cell, total = one_step_accuracy(acc_pred, truth)
        rep = run(stream.day(day), cfg, zones, fit_predictor(make(), stream.day(day), history), label=kind)
        out.append(PredictorScore(kind, cell, total, compare_runs(base, rep)))
    return out
