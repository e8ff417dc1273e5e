"""Per-step optimisation: candidate cars, weighted set packing, look-ahead filter.

Candidate cars are grown greedily-at-random (GRASP construction) from each
real request in turn.  The best disjoint subset of candidates is found by
branch and bound, and the resulting cars are then split into those to commit
now and those worth postponing.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .city import RoutePlan, ZoneMap, env_benefits, plan_shared_route
from .errors import InvalidInputError
from .model import (DEFAULT_CAPACITY, Car, RewardBreakdown, RewardWeights, Request, car_reward,
                    formation_step, is_feasible_car, qos_terms)


@dataclass(frozen=True)
class SolverParams:
    """Solver knobs.

    In deterministic mode the budget is counted in work units instead of
    wall-clock time: ``work_budget`` marginal car evaluations for candidate
    generation and ``node_budget`` branch-and-bound nodes for packing.
    """

    budget_ms: float = 60_000.0
    d_rate: float = 0.8
    l_size: int = 3
    seed: int = 0
    capacity: int = DEFAULT_CAPACITY
    deterministic: bool = True
    work_budget: int = 3000
    node_budget: int = 20_000
    generation_share: float = 0.5

    def __post_init__(self):
        if not self.budget_ms > 0:
            raise InvalidInputError("budget_ms must be > 0")
        if not 0.0 <= self.d_rate <= 1.0:
            raise InvalidInputError("d_rate must lie in [0, 1]")
        if self.l_size < 1 or self.capacity < 1:
            raise InvalidInputError("l_size and capacity must be >= 1")
        if not 0.0 < self.generation_share < 1.0:
            raise InvalidInputError("generation_share must lie in (0, 1)")


@dataclass(frozen=True)
class Candidate:
    members: frozenset
    value: float
    driver: int
    route: RoutePlan = field(compare=False)
    reward: RewardBreakdown = field(compare=False)
    commit_step: int = 0
    contains_provisional: bool = False
    ride_times: tuple = field(default=(), compare=False)
    solo_times: tuple = field(default=(), compare=False)

    @property
    def key(self) -> tuple[int, ...]:
        return tuple(sorted(self.members))

    def __len__(self):
        return len(self.members)

    def to_car(self) -> Car:
        return Car(self.key, self.driver, self.ride_times, self.solo_times, self.commit_step, self.reward)


class CarEvaluator:
    """Values candidate cars formed at (or after) step ``now``, with memoisation.

    Among several drivers, the designated one is whoever maximises the car
    value; ties go to the lowest request id.
    """

    def __init__(self, zones: ZoneMap, weights: RewardWeights, capacity: int = DEFAULT_CAPACITY, now: int = 0):
        self.zones = zones
        self.weights = weights
        self.capacity = capacity
        self.now = now
        self.cache: dict[frozenset, Candidate | None] = {}
        self.calls = 0

    def evaluate(self, members: Sequence[Request], commit_step: int | None = None) -> Candidate | None:
        """Best valuation of a car, or ``None`` when it is infeasible."""
        self.calls += 1
        key = frozenset(r.id for r in members)
        if commit_step is None and key in self.cache:
            return self.cache[key]
        out = self._evaluate(members, commit_step)
        if commit_step is None:
            self.cache[key] = out
        return out

    def _evaluate(self, members, commit_step):
        members = sorted(members, key=lambda r: r.id)
        step = formation_step(members, self.now) if commit_step is None else commit_step
        if not is_feasible_car(members, self.capacity, step):
            return None
        travel = self.zones._travel_rows
        solo = tuple(travel[r.origin][r.dest] for r in members)
        arrivals = [r.arrival for r in members]
        waits = [r.max_wait for r in members]
        best = None
        for d in members:
            if not d.is_driver:
                continue
            plan = plan_shared_route(members, d.id, self.zones, self.capacity)
            ride = tuple(plan.per_member_time[r.id] for r in members)
            detour, tba = qos_terms(ride, solo, arrivals, waits, step)
            reward = car_reward(env_benefits(plan, members, self.zones), -math.fsum(detour) - math.fsum(tba),
                                self.weights)
            if best is None or reward.total > best.value:
                best = Candidate(frozenset(r.id for r in members), reward.total, d.id, plan, reward, step,
                                 any(r.provisional for r in members), ride, solo)
        return best


class _Budget:
    def __init__(self, params: SolverParams, share: float, units: int):
        self.deterministic = params.deterministic
        self.units = units
        self.used = 0
        self.deadline = time.perf_counter() + params.budget_ms * share / 1000.0

    def spend(self, n: int = 1) -> None:
        self.used += n

    def exhausted(self) -> bool:
        if self.deterministic:
            return self.used >= self.units
        return time.perf_counter() >= self.deadline


def generate_candidates(pool: Sequence[Request], zones: ZoneMap, weights: RewardWeights,
                        params: SolverParams = SolverParams(), now: int | None = None,
                        rng: np.random.Generator | None = None,
                        evaluator: CarEvaluator | None = None) -> list[Candidate]:
    """Grow candidate cars with a randomised greedy construction.

    Seeds are taken from the whole pool in round-robin id order.  At each growth step
    every feasible single-request addition is scored by its marginal value;
    the top ``l_size`` form the restricted candidate list, from which the
    best is taken with probability ``d_rate`` and a uniform pick is made
    otherwise.  Growth stops when no addition increases the value or the car
    is full.  Only positive-value cars with at least one real member are
    kept, deduplicated by member set.
    Generation also stops after a full round of seeds yields nothing new.
    """
    pool = sorted(pool, key=lambda r: r.id)
    if not any(not r.provisional for r in pool):
        return []
    seeds = pool
    if now is None:
        now = max(r.arrival for r in pool if not r.provisional)
    if rng is None:
        rng = np.random.default_rng(params.seed)
    ev = evaluator or CarEvaluator(zones, weights, params.capacity, now)
    budget = _Budget(params, params.generation_share, params.work_budget)
    found: dict[frozenset, Candidate] = {}
    new_in_round = False
    for it in itertools.count():
        if budget.exhausted():
            break
        if it % len(seeds) == 0:
            if it and (not new_in_round or params.d_rate == 1.0):
                break
            new_in_round = False
        car = [seeds[it % len(seeds)]]
        in_car = {car[0].id}
        current = ev.evaluate(car)
        value = current.value if current is not None else 0.0
        while len(car) < params.capacity and not budget.exhausted():
            options = []
            for r in pool:
                if r.id in in_car:
                    continue
                budget.spend()
                cand = ev.evaluate(car + [r])
                if cand is None:
                    continue
                delta = cand.value - value
                if delta > 0:
                    options.append((-delta, r.id, r, cand))
            if not options:
                break
            options.sort(key=lambda o: (o[0], o[1]))
            rcl = options[: params.l_size]
            if rng.random() < params.d_rate:
                pick = rcl[0]
            else:
                pick = rcl[int(rng.integers(len(rcl)))]
            car.append(pick[2])
            in_car.add(pick[1])
            current, value = pick[3], pick[3].value
        if (current is not None and current.value > 0 and current.members not in found
                and not all(r.provisional for r in car)):
            found[current.members] = current
            new_in_round = True
    return sorted(found.values(), key=lambda c: c.key)


@dataclass
class PackingResult:
    selected: list[Candidate]
    total: float
    approximate: bool = False
    nodes: int = 0
    incumbent_history: list[float] = field(default_factory=list)


def _masks(candidates):
    bit = {}
    masks = []
    for c in candidates:
        m = 0
        for rid in c.members:
            if rid not in bit:
                bit[rid] = 1 << len(bit)
            m |= bit[rid]
        masks.append(m)
    return masks


def solve_packing(candidates: Sequence[Candidate], budget_ms: float | None = None,
                  node_limit: int | None = None) -> PackingResult:
    """Maximum-value set of pairwise disjoint candidates by branch and bound.

    Candidates are branched on in decreasing value-per-member order, "take"
    before "skip".  The bound adds the values of all remaining candidates
    compatible with the current partial packing.  When the node or time
    budget runs out the incumbent is returned with ``approximate=True``.
    """
    candidates = list(candidates)
    if any(not c.value > 0 for c in candidates):
        raise InvalidInputError("packing candidates must have positive value")
    m = len(candidates)
    if m == 0:
        return PackingResult([], 0.0, incumbent_history=[0.0])
    masks = _masks(candidates)
    values = [c.value for c in candidates]
    order = sorted(range(m), key=lambda k: (-values[k] / len(candidates[k]), k))
    masks = [masks[k] for k in order]
    values = [values[k] for k in order]
    deadline = None if budget_ms is None else time.perf_counter() + budget_ms / 1000.0

    best_val = 0.0
    best_set: tuple[int, ...] = ()
    history = [0.0]
    nodes = 0
    approximate = False
    # explicit stack of (position, used mask, value, chosen positions)
    stack = [(0, 0, 0.0, ())]
    while stack:
        if (node_limit is not None and nodes >= node_limit) or (
                deadline is not None and nodes % 256 == 0 and time.perf_counter() >= deadline):
            approximate = True
            break
        pos, used, val, chosen = stack.pop()
        nodes += 1
        if val > best_val:
            best_val, best_set = val, chosen
            history.append(val)
        if pos == m:
            continue
        bound = val
        for k in range(pos, m):
            if not masks[k] & used:
                bound += values[k]
        if bound <= best_val:
            continue
        # skip-branch pushed first so the take-branch is explored first
        stack.append((pos + 1, used, val, chosen))
        if not masks[pos] & used:
            stack.append((pos + 1, used | masks[pos], val + values[pos], chosen + (pos,)))
    picked = sorted(order[p] for p in best_set)
    selected = [candidates[k] for k in picked]
    return PackingResult(selected, math.fsum(c.value for c in selected), approximate, nodes, history)


def brute_force_packing(candidates: Sequence[Candidate]) -> PackingResult:
    """Exhaustive packing oracle for at most 20 candidates.

    Ties are broken in favour of the lexicographically smallest index set.
    """
    candidates = list(candidates)
    m = len(candidates)
    if m > 20:
        raise InvalidInputError(f"brute force refuses {m} > 20 candidates")
    masks = _masks(candidates)
    best_total, best_idx = 0.0, ()
    for size in range(1, m + 1):
        for idx in itertools.combinations(range(m), size):
            used = 0
            ok = True
            for k in idx:
                if masks[k] & used:
                    ok = False
                    break
                used |= masks[k]
            if not ok:
                continue
            total = math.fsum(candidates[k].value for k in idx)
            if total > best_total or (total == best_total and idx < best_idx):
                best_total, best_idx = total, idx
    return PackingResult([candidates[k] for k in best_idx], best_total, nodes=2 ** m)


def lookahead_filter(solution: Iterable[Candidate], pool: Mapping[int, Request], t: int,
                     provisional_candidates: Iterable[Candidate], margin: float = 0.0,
                     capacity: int = DEFAULT_CAPACITY) -> tuple[list[Candidate], list[Candidate]]:
    """Split a packing into cars to commit now and cars to defer.

    Cars with provisional members are always deferred (they become
    reservations).  A real-only car is deferred only when none of its
    members is about to expire, it still has a free seat, and some
    candidate extending it is worth more than it by over ``margin``.
    """
    extensions = [c for c in provisional_candidates]
    commit, defer = [], []
    for car in solution:
        if car.contains_provisional:
            defer.append(car)
            continue
        members = [pool[i] for i in car.members]
        if any(r.slack(t) < 1 for r in members) or len(car) >= capacity:
            commit.append(car)
            continue
        better = any(car.members < ext.members and ext.value > car.value + margin for ext in extensions)
        (defer if better else commit).append(car)
    return commit, defer


@dataclass
class StepSolution:
    commit: list[Candidate]
    defer: list[Candidate]
    candidates: list[Candidate]
    packing: PackingResult


def solve_step(pool: Sequence[Request], zones: ZoneMap, weights: RewardWeights, params: SolverParams,
               now: int, rng: np.random.Generator, lookahead: bool = True, margin: float = 0.0) -> StepSolution:
    """Candidate generation, packing and look-ahead for one time step."""
    evaluator = CarEvaluator(zones, weights, params.capacity, now)
    cands = generate_candidates(pool, zones, weights, params, now, rng, evaluator)
    budget_ms = None if params.deterministic else params.budget_ms * (1.0 - params.generation_share)
    node_limit = params.node_budget if params.deterministic else None
    packing = solve_packing(cands, budget_ms, node_limit)
    by_id = {r.id: r for r in pool}
    provisional = [c for c in cands if c.contains_provisional]
    if lookahead:
        commit, defer = lookahead_filter(packing.selected, by_id, now, provisional, margin, params.capacity)
    else:
        commit = [c for c in packing.selected if not c.contains_provisional]
        defer = [c for c in packing.selected if c.contains_provisional]
    return StepSolution(commit, defer, cands, packing)
