"""Core domain types and the car reward / quality-of-service arithmetic.

A *car* is a set of requests served by one private vehicle.  Its reward is a
weighted sum of environmental benefits and a (nonpositive) quality-of-service
term that penalises both detours and the delay before the car is formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import InvalidCarError, InvalidInputError

DEFAULT_CAPACITY = 5
DEFAULT_MAX_WAIT = 5


@dataclass(frozen=True, slots=True)
class Request:
    """One commuter trip demand.

    ``arrival`` is the step at which the request enters the system and
    ``max_wait`` the number of steps it tolerates before being assigned.
    Provisional requests are created from forecasts, never from real data.
    """

    id: int
    origin: int
    dest: int
    is_driver: bool
    max_wait: int
    arrival: int
    provisional: bool = False

    def __post_init__(self):
        if self.origin == self.dest:
            raise InvalidInputError(f"request {self.id}: origin equals destination ({self.origin})")
        if self.max_wait < 1:
            raise InvalidInputError(f"request {self.id}: max_wait must be >= 1, got {self.max_wait}")
        if self.origin < 0 or self.dest < 0:
            raise InvalidInputError(f"request {self.id}: negative zone index")

    @property
    def expiry(self) -> int:
        """Last step at which the request may still be assigned."""
        return self.arrival + self.max_wait

    def slack(self, now: int) -> int:
        return self.max_wait - (now - self.arrival)


@dataclass(frozen=True, slots=True)
class RewardWeights:
    rho_co2: float = 1.0
    rho_noise: float = 1.0
    rho_traffic: float = 1.0
    rho_qos: float = 1.0

    def __post_init__(self):
        for name in ("rho_co2", "rho_noise", "rho_traffic", "rho_qos"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {value}")

    def scaled(self, alpha: float) -> "RewardWeights":
        return RewardWeights(self.rho_co2 * alpha, self.rho_noise * alpha,
                             self.rho_traffic * alpha, self.rho_qos * alpha)


@dataclass(frozen=True, slots=True)
class RewardBreakdown:
    e_co2: float
    e_noise: float
    e_traffic: float
    qos: float
    total: float
    weights: RewardWeights = field(default_factory=RewardWeights, compare=False)

    @property
    def env_total(self) -> float:
        """Weighted environmental part of the reward."""
        return self.total - self.weights.rho_qos * self.qos


@dataclass(frozen=True, slots=True)
class Car:
    """A committed car.

    ``members`` is sorted by request id; ``ride_times`` and ``solo_times`` are
    aligned with it.
    """

    members: tuple[int, ...]
    driver: int
    ride_times: tuple[int, ...]
    solo_times: tuple[int, ...]
    commit_step: int
    reward: RewardBreakdown
    tba: tuple[float, ...] = ()
    detour: tuple[float, ...] = ()

    @property
    def size(self) -> int:
        return len(self.members)


def qos_terms(ride_times: Sequence[int], solo_times: Sequence[int], arrivals: Sequence[int],
              max_waits: Sequence[int], commit_step: int) -> tuple[list[float], list[float]]:
    """Return the per-member detour and to-be-assigned summands, validating inputs."""
    k = len(ride_times)
    if k == 0 or not (len(solo_times) == len(arrivals) == len(max_waits) == k):
        raise InvalidCarError("per-member sequences must be nonempty and of equal length")
    detour, tba = [], []
    for t, t_star, arr, wait in zip(ride_times, solo_times, arrivals, max_waits):
        if t_star < 1:
            raise InvalidCarError(f"solo time must be >= 1, got {t_star}")
        if t < t_star:
            raise InvalidCarError(f"ride time {t} shorter than solo time {t_star}")
        if wait < 1:
            raise InvalidCarError(f"max_wait must be >= 1, got {wait}")
        if commit_step < arr:
            raise InvalidCarError(f"commit step {commit_step} precedes arrival {arr}")
        if commit_step - arr > wait:
            raise InvalidCarError(
                f"commit step {commit_step} exceeds wait budget of member arriving at {arr} (max_wait {wait})")
        detour.append((t - t_star) / t)
        tba.append((commit_step - arr) / wait)
    return detour, tba


def quality_of_service(ride_times: Sequence[int], solo_times: Sequence[int], arrivals: Sequence[int],
                       max_waits: Sequence[int], commit_step: int) -> float:
    """Quality of service of a car formed at ``commit_step``.

    Sum of normalised detours plus normalised assignment delays, negated.
    The assignment time is the commit step, which coincides with the latest
    member arrival when the car is formed immediately.
    """
    detour, tba = qos_terms(ride_times, solo_times, arrivals, max_waits, commit_step)
    return -math.fsum(detour) - math.fsum(tba)


def car_reward(env: Sequence[float], qos: float, weights: RewardWeights) -> RewardBreakdown:
    e_co2, e_noise, e_traffic = env
    values = (e_co2, e_noise, e_traffic, qos)
    if not all(math.isfinite(v) for v in values):
        raise InvalidInputError(f"non-finite reward input: env={tuple(env)}, qos={qos}")
    if min(e_co2, e_noise, e_traffic) < 0:
        raise InvalidInputError(f"environmental benefits must be >= 0, got {tuple(env)}")
    if qos > 0:
        raise InvalidInputError(f"qos must be <= 0, got {qos}")
    total = (weights.rho_co2 * e_co2 + weights.rho_noise * e_noise
             + weights.rho_traffic * e_traffic + weights.rho_qos * qos)
    return RewardBreakdown(float(e_co2), float(e_noise), float(e_traffic), float(qos), total, weights)


def is_feasible_car(members: Iterable[Request], capacity: int, now: int) -> bool:
    members = list(members)
    if not members:
        raise InvalidInputError("a car needs at least one member")
    ids = [r.id for r in members]
    if len(set(ids)) != len(ids):
        return False
    if len(members) > capacity:
        return False
    if not any(r.is_driver for r in members):
        return False
    return all(now - r.arrival <= r.max_wait for r in members)


def formation_step(members: Iterable[Request], now: int) -> int:
    """Step at which a car with these members can be formed.

    Provisional members arrive in the future, so the car cannot exist before
    the latest arrival.
    """
    return max(now, max(r.arrival for r in members))


def check_car(car: Car, requests: Mapping[int, Request], capacity: int) -> None:
    """Raise ``InvalidCarError`` unless ``car`` satisfies every car invariant."""
    members = [requests[i] for i in car.members]
    if car.driver not in car.members or not requests[car.driver].is_driver:
        raise InvalidCarError(f"car {car.members}: designated driver {car.driver} invalid")
    if not is_feasible_car(members, capacity, car.commit_step):
        raise InvalidCarError(f"car {car.members} infeasible at step {car.commit_step}")
    if any(r.provisional for r in members):
        raise InvalidCarError(f"car {car.members} contains provisional requests")
    detour, tba = qos_terms(car.ride_times, car.solo_times, [r.arrival for r in members],
                            [r.max_wait for r in members], car.commit_step)
    for v in detour + tba:
        if not 0.0 <= v <= 1.0:
            raise InvalidCarError(f"car {car.members}: qos summand {v} outside [0, 1]")
