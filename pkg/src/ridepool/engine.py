"""The online loop: pool maintenance, forecasts, per-step solving, reservations.

A *reservation* is a car chosen by the optimiser that includes provisional
(forecast) requests.  Its real members are held back from the pool until
every provisional member has been matched by a real arrival with the same
origin, destination and arrival step; the car then commits.  If any
provisional member fails to show up, the reservation dissolves and its real
members go back to the pool.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .city import ZoneMap
from .errors import ConfigError, InvalidCarError, InvalidComparisonError, SimulationError
from .ingest import RequestStream
from .model import DEFAULT_CAPACITY, DEFAULT_MAX_WAIT, Car, RewardWeights, Request, check_car
from .predictor import BasePredictor, materialize, provisional_ids, smape_terms
from .solver import CarEvaluator, Candidate, SolverParams, solve_step

logger = logging.getLogger(__name__)

UNDEFINED = None


@dataclass(frozen=True)
class SimConfig:
    f: int = 0
    predictor: str = "none"
    solver: SolverParams = field(default_factory=SolverParams)
    weights: RewardWeights = field(default_factory=RewardWeights)
    capacity: int = DEFAULT_CAPACITY
    max_wait: int = DEFAULT_MAX_WAIT
    lookahead: bool = True
    margin: float = 0.0
    seed: int = 0
    driver_prob: float = 0.5
    check_invariants: bool = True

    def __post_init__(self):
        if not 0 <= self.f <= self.max_wait:
            raise ConfigError(f"forecast horizon f={self.f} must lie in [0, max_wait={self.max_wait}]")
        if self.capacity < 1:
            raise ConfigError("capacity must be >= 1")

    @property
    def solver_params(self) -> SolverParams:
        return replace(self.solver, capacity=self.capacity)


@dataclass
class Reservation:
    rid: int
    real: list[Request]
    awaited: dict[int, Request]
    matched: dict[int, Request] = field(default_factory=dict)
    formed_at: int = 0

    @property
    def complete(self) -> bool:
        return len(self.matched) == len(self.awaited)

    @property
    def real_members(self) -> list[Request]:
        return self.real + list(self.matched.values())

    def last_awaited_step(self) -> int:
        return max(p.arrival for p in self.awaited.values())


@dataclass
class PoolState:
    now: int = 0
    active_real: dict[int, Request] = field(default_factory=dict)
    provisional: dict[int, Request] = field(default_factory=dict)
    reservations: list[Reservation] = field(default_factory=list)
    next_provisional: Iterator[int] = field(default_factory=provisional_ids)
    next_reservation: int = 0
    pending_forecast: np.ndarray | None = None

    def reserved_ids(self) -> set[int]:
        out = set()
        for res in self.reservations:
            out.update(r.id for r in res.real_members)
            out.update(res.awaited)
        return out


@dataclass
class StepReport:
    t: int
    cars: list[Car]
    pool_real: int
    pool_provisional: int
    arrivals: int
    expired_unserved: int
    expired_singleton: int
    reservations_made: int = 0
    reservations_committed: int = 0
    reservations_dissolved: int = 0
    smape_sum: float = 0.0
    smape_cells: int = 0
    predicted_total: int = 0
    realized_total: int = 0
    approximate: bool = False

    @property
    def pool_size(self) -> int:
        return self.pool_real + self.pool_provisional

    @property
    def reward_total(self) -> float:
        return math.fsum(c.reward.total for c in self.cars)

    @property
    def reward_qos(self) -> float:
        return math.fsum(c.reward.weights.rho_qos * c.reward.qos for c in self.cars)

    @property
    def reward_env(self) -> float:
        return math.fsum(c.reward.env_total for c in self.cars)

    @property
    def served(self) -> int:
        return sum(c.size for c in self.cars)


@dataclass
class RunReport:
    steps: list[StepReport]
    day_label: dt.date
    horizon: int
    residual: int = 0
    label: str = ""

    @property
    def total_reward(self) -> float:
        return math.fsum(s.reward_total for s in self.steps)

    @property
    def arrivals(self) -> int:
        return sum(s.arrivals for s in self.steps)

    @property
    def served(self) -> int:
        return sum(s.served for s in self.steps)

    @property
    def expired_unserved(self) -> int:
        return sum(s.expired_unserved for s in self.steps)

    @property
    def cars(self) -> list[Car]:
        return [c for s in self.steps for c in s.cars]

    @property
    def average_pool_size(self) -> float:
        inside = [s.pool_size for s in self.steps if s.t <= self.horizon]
        return float(np.mean(inside)) if inside else 0.0

    @property
    def smape(self) -> float | None:
        """Cell-level SMAPE of the one-step-ahead forecasts, in percent."""
        cells = sum(s.smape_cells for s in self.steps)
        if cells == 0:
            return None
        return 100.0 * math.fsum(s.smape_sum for s in self.steps) / cells

    @property
    def smape_totals(self) -> float | None:
        """SMAPE of per-step demand totals, in percent."""
        scored = [s for s in self.steps if s.smape_cells]
        if not scored:
            return None
        terms = smape_terms([s.predicted_total for s in scored], [s.realized_total for s in scored])
        return 100.0 * math.fsum(terms) / len(terms)

    @property
    def served_fraction(self) -> float:
        return self.served / self.arrivals if self.arrivals else 0.0

    def summary(self) -> dict:
        return {
            "label": self.label,
            "day": self.day_label.isoformat(),
            "horizon": self.horizon,
            "total_reward": self.total_reward,
            "arrivals": self.arrivals,
            "served": self.served,
            "expired_unserved": self.expired_unserved,
            "residual": self.residual,
            "served_fraction": self.served_fraction,
            "cars": len(self.cars),
            "shared_cars": sum(1 for c in self.cars if c.size > 1),
            "average_pool_size": self.average_pool_size,
            "smape_cell": self.smape,
            "smape_total": self.smape_totals,
            "reservations_made": sum(s.reservations_made for s in self.steps),
            "reservations_committed": sum(s.reservations_committed for s in self.steps),
            "reservations_dissolved": sum(s.reservations_dissolved for s in self.steps),
        }


def _step_rng(cfg: SimConfig, t: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, t])


def step(state: PoolState, arrivals: Sequence[Request], cfg: SimConfig, predictor: BasePredictor | None,
         zones: ZoneMap, rng: np.random.Generator | None = None, horizon: int | None = None) -> tuple[PoolState, StepReport]:
    """Advance the pool by one step.

    ``horizon`` is the last step of the stream; forecasts beyond it are empty.
    The input state is not modified.
    """
    t = state.now + 1
    state = replace(state, now=t, active_real=dict(state.active_real), provisional={},
                    reservations=[replace(r, matched=dict(r.matched)) for r in state.reservations])
    rng = rng if rng is not None else _step_rng(cfg, t)
    capacity = cfg.capacity
    evaluator = CarEvaluator(zones, cfg.weights, capacity, t)
    cars: list[Car] = []
    n_committed = n_dissolved = 0
    arrivals = sorted(arrivals, key=lambda r: r.id)
    for r in arrivals:
        if r.arrival != t or r.provisional:
            raise SimulationError(f"arrival {r.id} has step {r.arrival}, provisional={r.provisional}", t)

    # (1) match arrivals against awaited provisional requests
    unmatched = []
    for r in arrivals:
        slot = _find_slot(state.reservations, r, t, exact=True) or _find_slot(state.reservations, r, t, exact=False)
        if slot is None:
            unmatched.append(r)
        else:
            res, pid = slot
            res.matched[pid] = r
    keep = []
    for res in state.reservations:
        if not res.complete:
            keep.append(res)
            continue
        cand = evaluator.evaluate(res.real_members, commit_step=t)
        if cand is None:
            n_dissolved += 1
            for r in res.real_members:
                state.active_real[r.id] = r
        else:
            n_committed += 1
            cars.append(cand.to_car())
    state.reservations = keep

    # (2) unmatched arrivals join the pool
    for r in unmatched:
        state.active_real[r.id] = r

    # (3) dissolve reservations whose awaited requests did not show up
    keep = []
    for res in state.reservations:
        if any(pid not in res.matched and p.arrival <= t for pid, p in res.awaited.items()):
            n_dissolved += 1
            for r in res.real_members:
                state.active_real[r.id] = r
        else:
            keep.append(res)
    state.reservations = keep

    # (4)-(5) refresh provisional requests from the latest forecasts
    report_smape = (0.0, 0, 0, 0)
    realized = None
    if predictor is not None:
        n = predictor.n_zones_
        realized = np.zeros((n, n), dtype=np.int64)
        for r in arrivals:
            realized[r.origin, r.dest] += 1
        if state.pending_forecast is not None:
            terms = smape_terms(state.pending_forecast, realized)
            report_smape = (math.fsum(terms), terms.size, int(state.pending_forecast.sum()), int(realized.sum()))
        state.pending_forecast = None
        predictor.observe(realized)
        if cfg.f > 0 and (horizon is None or t < horizon):
            forecasts = predictor.forecasts(cfg.f)
            state.pending_forecast = forecasts[0].grid.copy()
            reserved = _reserved_counts(state.reservations, n)
            for fc in forecasts:
                if horizon is not None and fc.for_step > horizon:
                    continue
                grid = fc.grid
                taken = reserved.get(fc.for_step)
                if taken is not None:
                    grid = np.maximum(grid - taken, 0)
                drivers = fc.drivers
                if drivers is not None and taken is not None:
                    drivers = np.maximum(drivers - reserved.get(("drivers", fc.for_step), 0), 0)
                fc = replace(fc, grid=grid, drivers=drivers)
                for p in materialize(fc, state.next_provisional, rng, cfg.driver_prob, cfg.max_wait):
                    state.provisional[p.id] = p

    # (6) optimise over real and provisional requests
    made = 0
    approximate = False
    if state.active_real:
        pool = list(state.active_real.values()) + list(state.provisional.values())
        sol = solve_step(pool, zones, cfg.weights, cfg.solver_params, t, rng, cfg.lookahead, cfg.margin)
        approximate = sol.packing.approximate
        if cfg.check_invariants:
            _check_disjoint(sol.packing.selected, t)
        # (7) commit real-only cars, turn provisional ones into reservations
        for cand in sol.commit:
            for rid in cand.members:
                del state.active_real[rid]
            cars.append(cand.to_car())
        for cand in sol.defer:
            if not cand.contains_provisional:
                continue
            real = [state.active_real.pop(rid) for rid in sorted(cand.members) if rid in state.active_real]
            awaited = {rid: state.provisional.pop(rid) for rid in sorted(cand.members) if rid in state.provisional}
            state.reservations.append(Reservation(state.next_reservation, real, awaited, {}, t))
            state.next_reservation += 1
            made += 1

    # (8) expire requests out of slack
    expired_unserved = expired_singleton = 0
    for rid in sorted(state.active_real):
        r = state.active_real[rid]
        if r.slack(t) > 0:
            continue
        del state.active_real[rid]
        if r.is_driver:
            cand = evaluator.evaluate([r], commit_step=t)
            cars.append(cand.to_car())
            expired_singleton += 1
        else:
            expired_unserved += 1

    if cfg.check_invariants:
        _check_cars(cars, t)

    pool_real = len(state.active_real) + sum(len(r.real_members) for r in state.reservations)
    pool_prov = len(state.provisional) + sum(len(r.awaited) - len(r.matched) for r in state.reservations)
    report = StepReport(t, cars, pool_real, pool_prov, len(arrivals), expired_unserved, expired_singleton,
                        made, n_committed, n_dissolved, *report_smape, approximate=approximate)
    return state, report


def _find_slot(reservations, r, t, exact):
    for res in reservations:
        for pid, p in res.awaited.items():
            if pid in res.matched or p.arrival != t or p.origin != r.origin or p.dest != r.dest:
                continue
            if exact and p.is_driver != r.is_driver:
                continue
            return res, pid
    return None


def _reserved_counts(reservations, n):
    out = {}
    for res in reservations:
        for pid, p in res.awaited.items():
            if pid in res.matched:
                continue
            grid = out.setdefault(p.arrival, np.zeros((n, n), dtype=np.int64))
            grid[p.origin, p.dest] += 1
            if p.is_driver:
                dgrid = out.setdefault(("drivers", p.arrival), np.zeros((n, n), dtype=np.int64))
                dgrid[p.origin, p.dest] += 1
    return out


def _check_disjoint(selected: Sequence[Candidate], t: int) -> None:
    seen = set()
    for c in selected:
        if seen & c.members:
            raise SimulationError(f"packing selected overlapping cars {sorted(seen & c.members)}", t)
        seen |= c.members


def _check_cars(cars, t):
    seen = set()
    for car in cars:
        if seen.intersection(car.members):
            raise SimulationError(f"request committed twice: {sorted(seen.intersection(car.members))}", t)
        seen.update(car.members)
        if car.commit_step != t:
            raise SimulationError(f"car {car.members} committed at {car.commit_step}, now {t}", t)


class _Ledger:
    """Every request id ever committed in a run, plus the requests themselves."""

    def __init__(self):
        self.committed: set[int] = set()
        self.requests: dict[int, Request] = {}


def run(stream: RequestStream, cfg: SimConfig, zones: ZoneMap, predictor: BasePredictor | None = None,
        label: str = "") -> RunReport:
    """Simulate a whole stream, then drain for ``max_wait`` extra steps.

    The predictor must already be fitted (see :func:`ridepool.predictor.fit_predictor`).
    Each step uses its own generator seeded by ``(cfg.seed, t)``, so runs are
    reproducible in deterministic-budget mode.
    """
    if stream.horizon < 1:
        raise ConfigError("stream horizon must be >= 1")
    if cfg.f > 0 and predictor is None:
        raise ConfigError(f"f={cfg.f} needs a predictor")
    state = PoolState()
    reports = []
    ledger = _Ledger()
    for t in range(1, stream.horizon + cfg.max_wait + 1):
        arrivals = stream.arrivals(t)
        for r in arrivals:
            ledger.requests[r.id] = r
        if (predictor is None and not arrivals and not state.active_real and not state.reservations):
            # nothing can happen in an empty step without forecasts
            state = replace(state, now=t)
            reports.append(StepReport(t, [], 0, 0, 0, 0, 0))
            continue
        if t > stream.horizon and not state.active_real and not state.reservations:
            state = replace(state, now=t, provisional={})
            reports.append(StepReport(t, [], 0, 0, 0, 0, 0))
            continue
        state, rep = step(state, arrivals, cfg, predictor if t <= stream.horizon else None, zones,
                          horizon=stream.horizon)
        if cfg.check_invariants:
            for car in rep.cars:
                dup = ledger.committed.intersection(car.members)
                if dup:
                    raise SimulationError(f"request(s) {sorted(dup)} committed twice", t)
                ledger.committed.update(car.members)
                try:
                    check_car(car, ledger.requests, cfg.capacity)
                except (InvalidCarError, KeyError) as exc:
                    raise SimulationError(f"invalid car {car.members}: {exc}", t) from exc
        reports.append(rep)
    residual = len(state.active_real) + sum(len(r.real_members) for r in state.reservations)
    report = RunReport(reports, stream.day_label, stream.horizon, residual, label)
    if cfg.check_invariants and report.arrivals != report.served + report.expired_unserved + residual:
        raise SimulationError(
            f"conservation broken: {report.arrivals} arrivals vs {report.served} served + "
            f"{report.expired_unserved} expired + {residual} residual")
    return report


def compare_runs(baseline: RunReport, treatment: RunReport) -> float | None:
    """Percentage change of total reward; ``None`` when the baseline total is zero."""
    if baseline.day_label != treatment.day_label or baseline.horizon != treatment.horizon:
        raise InvalidComparisonError(
            f"runs cover different streams ({baseline.day_label}/{baseline.horizon} vs "
            f"{treatment.day_label}/{treatment.horizon})")
    base = baseline.total_reward
    if base == 0:
        return UNDEFINED
    return 100.0 * (treatment.total_reward - base) / abs(base)


STEP_COLUMNS = ("t", "committed", "reward_total", "reward_qos", "reward_env", "pool_real",
                "pool_provisional", "expired")


def write_step_csv(path: str | Path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        for s in report.steps:
            w.writerow([s.t, len(s.cars), repr(s.reward_total), repr(s.reward_qos), repr(s.reward_env),
                        s.pool_real, s.pool_provisional, s.expired_unserved])


def write_summary(path: str | Path, report: RunReport, extra: dict | None = None) -> None:
    data = report.summary()
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
