"""Request streams from NYC TLC trip records or a synthetic periodic generator."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError, FormatError
from .model import DEFAULT_MAX_WAIT, Request

logger = logging.getLogger(__name__)

PICKUP_COLUMN = "tpep_pickup_datetime"
PU_COLUMN = "PULocationID"
DO_COLUMN = "DOLocationID"
REQUIRED_COLUMNS = (PICKUP_COLUMN, PU_COLUMN, DO_COLUMN)
STEPS_PER_DAY = 1440
DEFAULT_START = dt.date(2019, 6, 1)


@dataclass(frozen=True)
class TripRecord:
    pickup_datetime: dt.datetime
    pu_location: int
    do_location: int
    pu_zone: int | None = None
    do_zone: int | None = None


@dataclass
class ParseResult:
    records: list[TripRecord]
    malformed: int = 0
    unmapped: int = 0
    other_day: int = 0
    malformed_rows: list[int] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return self.malformed + self.unmapped


def parse_trip_records(source: TextIO, day: dt.date, lookup: Mapping[int, int] | None = None) -> ParseResult:
    """Read a TLC yellow-taxi CSV and keep the trips of ``day``.

    Rows whose pickup/dropoff ids are missing from ``lookup`` are skipped,
    as are rows that fail to parse; both are counted.  Row numbers in
    ``malformed_rows`` count the header as row 1.
    """
    reader = csv.DictReader(source)
    header = reader.fieldnames or []
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise FormatError(f"missing required column {col!r}")
    result = ParseResult(records=[])
    for rowno, row in enumerate(reader, 2):
        try:
            stamp = dt.datetime.fromisoformat(row[PICKUP_COLUMN].strip())
            pu = int(row[PU_COLUMN])
            do = int(row[DO_COLUMN])
        except (TypeError, ValueError, AttributeError):
            result.malformed += 1
            result.malformed_rows.append(rowno)
            logger.warning("row %d: malformed, skipped", rowno)
            continue
        if stamp.date() != day:
            result.other_day += 1
            continue
        if lookup is not None:
            if pu not in lookup or do not in lookup:
                result.unmapped += 1
                continue
            result.records.append(TripRecord(stamp, pu, do, lookup[pu], lookup[do]))
        else:
            result.records.append(TripRecord(stamp, pu, do, pu, do))
    return result


@dataclass(frozen=True)
class StreamPolicy:
    driver_prob: float = 0.5
    max_wait: int = DEFAULT_MAX_WAIT
    step_seconds: int = 60
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.driver_prob <= 1.0:
            raise ConfigError(f"driver_prob must lie in [0, 1], got {self.driver_prob}")
        if self.max_wait < 1 or self.step_seconds < 1:
            raise ConfigError("max_wait and step_seconds must be >= 1")


@dataclass(frozen=True)
class RequestStream:
    """Requests binned by arrival step.

    ``per_step[k]`` holds the requests arriving at step ``k + 1``.  Multi-day
    streams are laid out back to back, ``steps_per_day`` steps per day.
    """

    horizon: int
    per_step: tuple[tuple[Request, ...], ...]
    day_label: dt.date = DEFAULT_START
    steps_per_day: int = STEPS_PER_DAY
    n_zones: int | None = None
    dropped: int = 0

    def __post_init__(self):
        if len(self.per_step) != self.horizon:
            raise ConfigError(f"per_step has {len(self.per_step)} entries, horizon is {self.horizon}")

    def __len__(self):
        return sum(len(s) for s in self.per_step)

    def arrivals(self, t: int) -> tuple[Request, ...]:
        if 1 <= t <= self.horizon:
            return self.per_step[t - 1]
        return ()

    def requests(self) -> list[Request]:
        return [r for step in self.per_step for r in step]

    @property
    def n_days(self) -> int:
        return -(-self.horizon // self.steps_per_day)

    def date_of(self, day: int) -> dt.date:
        return self.day_label + dt.timedelta(days=day)

    def zone_count(self) -> int:
        if self.n_zones is not None:
            return self.n_zones
        return 1 + max((max(r.origin, r.dest) for r in self.requests()), default=0)

    def counts(self, n: int | None = None) -> np.ndarray:
        """Origin-destination count grids, shape ``(horizon, n, n)``."""
        n = n or self.zone_count()
        out = np.zeros((self.horizon, n, n), dtype=np.int64)
        for k, step in enumerate(self.per_step):
            for r in step:
                out[k, r.origin, r.dest] += 1
        return out

    def driver_counts(self, n: int | None = None) -> np.ndarray:
        n = n or self.zone_count()
        out = np.zeros((self.horizon, n, n), dtype=np.int64)
        for k, step in enumerate(self.per_step):
            for r in step:
                if r.is_driver:
                    out[k, r.origin, r.dest] += 1
        return out

    def day(self, d: int) -> "RequestStream":
        """Day ``d`` (0-based) as its own stream, arrivals rebased to 1..steps_per_day."""
        if not 0 <= d < self.n_days:
            raise IndexError(f"day {d} outside stream of {self.n_days} days")
        lo = d * self.steps_per_day
        hi = min(lo + self.steps_per_day, self.horizon)
        steps = tuple(tuple(replace(r, arrival=r.arrival - lo) for r in s) for s in self.per_step[lo:hi])
        return RequestStream(hi - lo, steps, self.date_of(d), self.steps_per_day, self.n_zones)

    def head(self, days: int) -> "RequestStream":
        """The first ``days`` days (no rebasing needed)."""
        hi = min(days * self.steps_per_day, self.horizon)
        return RequestStream(hi, self.per_step[:hi], self.day_label, self.steps_per_day, self.n_zones)


def build_stream(records: Sequence[TripRecord], policy: StreamPolicy = StreamPolicy(),
                 day_label: dt.date | None = None, n_zones: int | None = None) -> RequestStream:
    """Bin trip records into per-step requests with sampled driver flags.

    Trips whose zones coincide after mapping are dropped (``dropped`` on the
    result).  Driver flags come from a generator seeded by ``policy.seed``.
    """
    ordered = sorted(records, key=lambda rec: rec.pickup_datetime)
    if day_label is None:
        day_label = ordered[0].pickup_datetime.date() if ordered else DEFAULT_START
    horizon = -(-86400 // policy.step_seconds)
    rng = np.random.default_rng(policy.seed)
    flags = rng.random(len(ordered)) < policy.driver_prob
    per_step: list[list[Request]] = [[] for _ in range(horizon)]
    next_id = 0
    dropped = 0
    for rec, is_driver in zip(ordered, flags):
        if rec.pu_zone == rec.do_zone:
            dropped += 1
            continue
        since = rec.pickup_datetime - dt.datetime.combine(rec.pickup_datetime.date(), dt.time())
        step = int(since.total_seconds()) // policy.step_seconds + 1
        per_step[step - 1].append(Request(next_id, rec.pu_zone, rec.do_zone, bool(is_driver),
                                          policy.max_wait, step))
        next_id += 1
    return RequestStream(horizon, tuple(tuple(s) for s in per_step), day_label, horizon, n_zones, dropped)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic workload: per-step-of-day OD rate template repeated over days."""

    days: int
    base_rates: np.ndarray
    noise: str = "poisson"
    weekend_scale: float = 1.0
    weekend_days: frozenset = frozenset({0, 1})
    seed: int = 0
    driver_prob: float = 0.5
    max_wait: int = DEFAULT_MAX_WAIT
    start: dt.date = DEFAULT_START
    n_zones: int | None = None
    steps_per_day: int | None = None


def synth_stream(cfg: SynthConfig) -> RequestStream:
    """Draw a multi-day stream from a rate template.

    Day ``d`` is scaled by ``weekend_scale`` when ``d % 7`` is in
    ``weekend_days`` (the default start, 1 June 2019, is a Saturday).  With
    ``noise="none"`` counts are the rounded rates.
    """
    rates = np.asarray(cfg.base_rates, dtype=float)
    if rates.ndim != 3 or rates.shape[1] != rates.shape[2]:
        raise ConfigError(f"base_rates must have shape (steps, n, n), got {rates.shape}")
    steps, n, _ = rates.shape
    if cfg.n_zones is not None and cfg.n_zones != n:
        raise ConfigError(f"base_rates cover {n} zones, config says {cfg.n_zones}")
    if cfg.steps_per_day is not None and cfg.steps_per_day != steps:
        raise ConfigError(f"base_rates cover {steps} steps, config says {cfg.steps_per_day}")
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ConfigError("base_rates must be finite and nonnegative")
    if np.any(np.einsum("kii->ki", rates) != 0):
        raise ConfigError("base_rates must have a zero diagonal")
    if cfg.noise not in ("poisson", "none"):
        raise ConfigError(f"noise must be 'poisson' or 'none', got {cfg.noise!r}")
    if cfg.days < 1:
        raise ConfigError("days must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    per_step = []
    next_id = 0
    for d in range(cfg.days):
        scale = cfg.weekend_scale if d % 7 in cfg.weekend_days else 1.0
        lam = rates * scale
        if cfg.noise == "poisson":
            counts = rng.poisson(lam)
        else:
            counts = np.floor(lam + 0.5).astype(np.int64)
        for k in range(steps):
            t = d * steps + k + 1
            cells = np.argwhere(counts[k] > 0)
            reqs = []
            total = int(counts[k].sum())
            flags = rng.random(total) < cfg.driver_prob
            f = 0
            for i, j in cells:
                for _ in range(counts[k, i, j]):
                    reqs.append(Request(next_id, int(i), int(j), bool(flags[f]), cfg.max_wait, t))
                    next_id += 1
                    f += 1
            per_step.append(tuple(reqs))
    return RequestStream(cfg.days * steps, tuple(per_step), cfg.start, steps, n)


def commuter_rates(n_zones: int, steps_per_day: int = STEPS_PER_DAY, daily_total: float = 200.0,
                   hubs: int = 3, corridors: int = 12, peak_share: float = 0.7, peak_width_h: float = 0.75,
                   seed: int = 0) -> np.ndarray:
    """Rate template with morning/evening commuting peaks.

    A few hub zones attract morning trips from ``corridors`` home zones and
    send them back in the evening; the rest of the demand is spread
    uniformly over all OD pairs and the whole day.  Rates sum to
    ``daily_total`` per day.
    """
    rng = np.random.default_rng(seed)
    n = n_zones
    hub_zones = rng.choice(n, size=min(hubs, n), replace=False)
    homes = [z for z in range(n) if z not in set(hub_zones)]
    rng.shuffle(homes)
    homes = homes[:corridors] or list(range(n))
    pairs = [(int(h), int(hub_zones[k % len(hub_zones)])) for k, h in enumerate(homes)]
    hours = np.arange(steps_per_day) / steps_per_day * 24.0
    morning = np.exp(-0.5 * ((hours - 8.5) / peak_width_h) ** 2)
    evening = np.exp(-0.5 * ((hours - 18.0) / peak_width_h) ** 2)
    morning /= morning.sum()
    evening /= evening.sum()
    rates = np.zeros((steps_per_day, n, n))
    peak = daily_total * peak_share / 2.0
    for home, hub in pairs:
        if home == hub:
            continue
        rates[:, home, hub] += peak / len(pairs) * morning
        rates[:, hub, home] += peak / len(pairs) * evening
    background = daily_total * (1.0 - peak_share)
    off = ~np.eye(n, dtype=bool)
    rates[:, off] += background / (steps_per_day * off.sum())
    return rates


def write_stream(path: str | Path, stream: RequestStream) -> None:
    """Canonical stream file: one ``step id origin dest is_driver max_wait`` line per request."""
    with open(path, "w") as fh:
        fh.write(f"# horizon={stream.horizon} steps_per_day={stream.steps_per_day} "
                 f"start={stream.day_label.isoformat()} zones={stream.zone_count()}\n")
        for step in stream.per_step:
            for r in step:
                fh.write(f"{r.arrival} {r.id} {r.origin} {r.dest} {int(r.is_driver)} {r.max_wait}\n")


def read_stream(path: str | Path) -> RequestStream:
    meta = {}
    reqs: list[Request] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 'step id origin dest is_driver max_wait'")
            try:
                step, rid, o, d, drv, wait = (int(p) for p in parts)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            reqs.append(Request(rid, o, d, bool(drv), wait, step))
    horizon = int(meta.get("horizon", max((r.arrival for r in reqs), default=0)))
    steps_per_day = int(meta.get("steps_per_day", STEPS_PER_DAY))
    start = dt.date.fromisoformat(meta["start"]) if "start" in meta else DEFAULT_START
    n_zones = int(meta["zones"]) if "zones" in meta else None
    per_step: list[list[Request]] = [[] for _ in range(horizon)]
    for r in reqs:
        if not 1 <= r.arrival <= horizon:
            raise FormatError(f"{path}: request {r.id} arrives at {r.arrival}, outside [1, {horizon}]")
        per_step[r.arrival - 1].append(r)
    for step in per_step:
        step.sort(key=lambda r: r.id)
    return RequestStream(horizon, tuple(tuple(s) for s in per_step), start, steps_per_day, n_zones)


def stream_from_requests(requests: Iterable[Request], horizon: int, steps_per_day: int | None = None,
                         day_label: dt.date = DEFAULT_START, n_zones: int | None = None) -> RequestStream:
    """Assemble a stream from hand-made requests (tests, demos)."""
    per_step: list[list[Request]] = [[] for _ in range(horizon)]
    for r in sorted(requests, key=lambda r: r.id):
        per_step[r.arrival - 1].append(r)
    return RequestStream(horizon, tuple(tuple(s) for s in per_step), day_label,
                         steps_per_day or horizon, n_zones)
