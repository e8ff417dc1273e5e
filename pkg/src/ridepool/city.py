"""Zone topology, shared-route planning and the environmental benefit model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidCarError, InvalidInputError
from .model import DEFAULT_CAPACITY, Request

PICKUP = "pickup"
DROPOFF = "dropoff"


@dataclass(frozen=True, eq=False)
class ZoneMap:
    """All-pairs travel times (whole steps) and distances (km) between zones."""

    n: int
    travel: np.ndarray
    dist: np.ndarray
    _route_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        travel = np.asarray(self.travel, dtype=np.int64)
        dist = np.asarray(self.dist, dtype=np.float64)
        if travel.shape != (self.n, self.n) or dist.shape != (self.n, self.n):
            raise InvalidInputError(f"matrices must be {self.n}x{self.n}")
        if np.any(np.diag(travel) != 0):
            raise InvalidInputError("travel[i][i] must be 0")
        off = ~np.eye(self.n, dtype=bool)
        if np.any(travel[off] < 1):
            raise InvalidInputError("travel times between distinct zones must be >= 1")
        if np.any(dist < 0):
            raise InvalidInputError("distances must be >= 0")
        travel.setflags(write=False)
        dist.setflags(write=False)
        object.__setattr__(self, "travel", travel)
        object.__setattr__(self, "dist", dist)
        # plain-python copies keep the route enumeration loop fast
        object.__setattr__(self, "_travel_rows", travel.tolist())
        object.__setattr__(self, "_dist_rows", dist.tolist())


def shortest_travel_times(edges: Iterable[Sequence], n: int | None = None) -> ZoneMap:
    """Build a :class:`ZoneMap` from an undirected weighted zone graph.

    ``edges`` holds ``(zone_a, zone_b, steps, km)`` tuples.  Times and
    distances are minimised independently; times are rounded up to whole
    steps with a floor of one step between distinct zones.
    """
    edges = [(int(a), int(b), float(s), float(k)) for a, b, s, k in edges]
    for a, b, s, k in edges:
        if s < 0 or k < 0:
            raise InvalidInputError(f"edge {a}-{b} has a negative weight")
        if a < 0 or b < 0:
            raise InvalidInputError(f"edge {a}-{b} has a negative zone index")
    if n is None:
        n = 1 + max((max(a, b) for a, b, _, _ in edges), default=0)
    if n == 1:
        return ZoneMap(1, np.zeros((1, 1), dtype=np.int64), np.zeros((1, 1)))
    times = _all_pairs(edges, n, 2)
    kms = _all_pairs(edges, n, 3)
    unreachable = np.argwhere(~np.isfinite(times))
    if len(unreachable):
        i, j = unreachable[0]
        raise InvalidInputError(f"zone graph is disconnected: no path from zone {i} to zone {j}")
    # guard float noise before rounding up, e.g. 0.1+0.2 steps
    travel = np.ceil(np.round(times, 9)).astype(np.int64)
    travel = np.maximum(travel, 1)
    np.fill_diagonal(travel, 0)
    return ZoneMap(n, travel, kms)


def _all_pairs(edges, n, col):
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for e in edges:
        a, b, w = e[0], e[1], e[col]
        if a != b and w < d[a, b]:
            d[a, b] = d[b, a] = w
    for k in range(n):
        np.minimum(d, d[:, k, None] + d[None, k, :], out=d)
    return d


def grid_zone_map(rows: int, cols: int, steps: float = 1.0, km: float = 1.0) -> ZoneMap:
    """Rectangular grid of zones, row-major numbering, uniform edges."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            z = r * cols + c
            if c + 1 < cols:
                edges.append((z, z + 1, steps, km))
            if r + 1 < rows:
                edges.append((z, z + cols, steps, km))
    return shortest_travel_times(edges, rows * cols)


def read_zone_file(path: str | Path) -> ZoneMap:
    """Parse an edge list file with lines ``zone_a zone_b steps km``."""
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'zone_a zone_b steps km'")
            try:
                edges.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not edges:
        raise FormatError(f"{path}: no edges")
    return shortest_travel_times(edges)


def write_zone_file(path: str | Path, zones: ZoneMap) -> None:
    """Write the adjacent-pair edges of a map (pairs at travel 1 step)."""
    with open(path, "w") as fh:
        for i in range(zones.n):
            for j in range(i + 1, zones.n):
                if zones.travel[i, j] == 1:
                    fh.write(f"{i} {j} 1 {float(zones.dist[i, j])!r}\n")


def read_zone_lookup(path: str | Path | None = None) -> dict[int, int]:
    """Parse ``tlc_location_id zone_index`` lines; default is the bundled 5x5 Manhattan table."""
    if path is None:
        path = Path(__file__).parent / "data" / "manhattan_5x5.txt"
    lookup = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'tlc_location_id zone_index'")
            lookup[int(parts[0])] = int(parts[1])
    return lookup


@dataclass(frozen=True)
class RoutePlan:
    stops: tuple[tuple[int, str, int], ...]
    total_km: float
    total_steps: int
    per_member_time: dict = field(hash=False)


def plan_shared_route(members: Sequence[Request], driver: int, zones: ZoneMap,
                      capacity: int = DEFAULT_CAPACITY) -> RoutePlan:
    """Cheapest (by km) stop order serving every member of a car.

    The driver's pickup is the first stop and their dropoff the last; every
    rider is picked up before being dropped off.  All valid orders are
    enumerated (with pruning on partial length); ties go to the
    lexicographically smallest stop sequence by request id.
    """
    if len(members) > capacity:
        raise InvalidCarError(f"{len(members)} members exceed capacity {capacity}")
    ordered = sorted(members, key=lambda r: r.id)
    ids = [r.id for r in ordered]
    if driver not in ids:
        raise InvalidCarError(f"driver {driver} is not a member")
    pos = ids.index(driver)
    key = (tuple((r.origin, r.dest) for r in ordered), pos)
    cache = zones._route_cache
    hit = cache.get(key)
    if hit is None:
        hit = cache[key] = _enumerate_route(key[0], pos, zones)
    order, total_km, total_steps, times = hit
    stops = tuple((ordered[p].origin if ev == 0 else ordered[p].dest,
                   PICKUP if ev == 0 else DROPOFF, ids[p]) for p, ev in order)
    return RoutePlan(stops, total_km, total_steps, {ids[p]: t for p, t in enumerate(times)})


def _enumerate_route(ods, drv, zones):
    dist = zones._dist_rows
    travel = zones._travel_rows
    riders = [p for p in range(len(ods)) if p != drv]
    start = ods[drv][0]
    end = ods[drv][1]
    best = [math.inf, None]
    # events are (position, 0=pickup / 1=dropoff); children explored in sorted
    # order so the first minimum found is the lexicographically smallest
    seq = [(drv, 0)]

    def zone_of(ev):
        return ods[ev[0]][ev[1]]

    def dfs(here, km, picked, dropped):
        if km >= best[0]:
            return
        if len(dropped) == len(riders):
            total = km + dist[here][end]
            if total < best[0]:
                best[0] = total
                best[1] = list(seq)
            return
        for p in riders:
            if p in dropped:
                continue
            ev = (p, 1) if p in picked else (p, 0)
            z = zone_of(ev)
            seq.append(ev)
            if ev[1] == 0:
                picked.add(p)
                dfs(z, km + dist[here][z], picked, dropped)
                picked.discard(p)
            else:
                dropped.add(p)
                dfs(z, km + dist[here][z], picked, dropped)
                dropped.discard(p)
            seq.pop()

    dfs(start, 0.0, set(), set())
    order = best[1] + [(drv, 1)]
    # accumulate times along the route
    clock = 0
    here = start
    at_pick = {}
    times = [0] * len(ods)
    for p, ev in order:
        z = ods[p][ev]
        clock += travel[here][z]
        here = z
        if ev == 0:
            at_pick[p] = clock
        else:
            times[p] = clock - at_pick[p]
    km = 0.0
    here = start
    for p, ev in order[1:]:
        z = ods[p][ev]
        km += dist[here][z]
        here = z
    return tuple(order), km, clock, tuple(times)


def env_benefits(plan: RoutePlan, members: Sequence[Request], zones: ZoneMap) -> tuple[float, float, float]:
    """Surrogate environmental benefits of a shared ride.

    CO2 and noise savings are both proportional to the kilometres saved with
    respect to everybody driving alone; traffic relief counts the cars taken
    off the road.
    """
    dist = zones._dist_rows
    solo = math.fsum(dist[r.origin][r.dest] for r in members)
    km_saved = max(0.0, solo - plan.total_km)
    return km_saved, km_saved, float(len(members) - 1)
