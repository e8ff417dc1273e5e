import heapq
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ridepool.city import (DROPOFF, PICKUP, env_benefits, grid_zone_map, plan_shared_route, read_zone_file,
                           read_zone_lookup, shortest_travel_times, write_zone_file)
from ridepool.errors import FormatError, InvalidCarError, InvalidInputError
from ridepool.model import Request


def dijkstra_all_pairs(edges, n, col):
    adj = {i: [] for i in range(n)}
    for e in edges:
        adj[e[0]].append((e[1], e[col]))
        adj[e[1]].append((e[0], e[col]))
    out = np.full((n, n), math.inf)
    for src in range(n):
        dist = {src: 0.0}
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, math.inf):
                continue
            for v, w in adj[u]:
                if d + w < dist.get(v, math.inf):
                    dist[v] = d + w
                    heapq.heappush(heap, (d + w, v))
        for v, d in dist.items():
            out[src, v] = d
    return out


def random_connected_edges(rng, n, extra):
    edges = []
    for v in range(1, n):
        u = int(rng.integers(v))
        edges.append((u, v, int(rng.integers(1, 6)), float(rng.integers(1, 9))))
    for _ in range(extra):
        a, b = rng.choice(n, 2, replace=False)
        edges.append((int(a), int(b), int(rng.integers(1, 6)), float(rng.integers(1, 9))))
    return edges


def test_grid_corner_to_corner(grid3):
    assert grid3.travel[0, 8] == 4
    assert grid3.dist[0, 8] == 4.0


def test_single_zone():
    zm = shortest_travel_times([], n=1)
    assert zm.travel.tolist() == [[0]]


@pytest.mark.parametrize("seed", range(10))
def test_all_pairs_match_repeated_single_source(seed):
    rng = np.random.default_rng(seed)
    edges = random_connected_edges(rng, 6, 4)
    zm = shortest_travel_times(edges, 6)
    oracle_t = dijkstra_all_pairs(edges, 6, 2)
    oracle_k = dijkstra_all_pairs(edges, 6, 3)
    assert np.array_equal(zm.travel, oracle_t.astype(np.int64))
    assert np.allclose(zm.dist, oracle_k)


@given(st.integers(0, 10_000), st.integers(3, 7), st.integers(0, 6))
def test_triangle_inequality(seed, n, extra):
    zm = shortest_travel_times(random_connected_edges(np.random.default_rng(seed), n, extra), n)
    t, d = zm.travel, zm.dist
    for i, j, k in itertools.product(range(n), repeat=3):
        assert t[i, j] <= t[i, k] + t[k, j]
        assert d[i, j] <= d[i, k] + d[k, j] + 1e-9


def test_fractional_steps_round_up():
    zm = shortest_travel_times([(0, 1, 0.1, 1), (1, 2, 0.2, 1), (0, 2, 5, 9)])
    assert zm.travel[0, 2] == 1   # 0.3 steps, not 0.30000000000000004 -> ceil 1 either way
    assert zm.travel[0, 1] == 1   # floor of one step between distinct zones


def test_disconnected_names_pair():
    with pytest.raises(InvalidInputError, match="zone 0 to zone 2"):
        shortest_travel_times([(0, 1, 1, 1), (2, 3, 1, 1)])


def test_zone_file_round_trip(tmp_path, grid3):
    p = tmp_path / "z.txt"
    write_zone_file(p, grid3)
    again = read_zone_file(p)
    assert np.array_equal(again.travel, grid3.travel)
    bad = tmp_path / "bad.txt"
    bad.write_text("0 1 1\n")
    with pytest.raises(FormatError):
        read_zone_file(bad)


def test_bundled_lookup():
    lookup = read_zone_lookup()
    assert lookup[161] in range(25) and lookup[237] in range(25)
    assert set(lookup.values()) <= set(range(25))


def test_driver_alone_route(grid5):
    d = Request(1, 0, 12, True, 5, 1)
    plan = plan_shared_route([d], 1, grid5)
    assert plan.stops == ((0, PICKUP, 1), (12, DROPOFF, 1))
    assert plan.per_member_time[1] == grid5.travel[0, 12]


def test_identical_od_no_detour(grid5):
    d = Request(1, 0, 12, True, 5, 1)
    r = Request(2, 0, 12, False, 5, 1)
    plan = plan_shared_route([d, r], 1, grid5)
    assert plan.per_member_time == {1: 4, 2: 4}
    assert plan.total_km == 4.0


def route_oracle(members, driver, zones):
    """Minimum km over every valid stop order, by brute-force permutation."""
    riders = [r for r in members if r.id != driver.id]
    events = [(r, 0) for r in riders] + [(r, 1) for r in riders]
    best = math.inf
    for perm in itertools.permutations(events):
        seen = set()
        ok = True
        for r, ev in perm:
            if ev == 1 and r.id not in seen:
                ok = False
                break
            seen.add(r.id)
        if not ok:
            continue
        stops = [driver.origin] + [r.origin if ev == 0 else r.dest for r, ev in perm] + [driver.dest]
        best = min(best, sum(zones.dist[a, b] for a, b in zip(stops, stops[1:])))
    return best


def test_three_member_line_graph_matches_permutations():
    line = shortest_travel_times([(0, 1, 1, 1), (1, 2, 1, 2), (2, 3, 1, 1)])
    d = Request(1, 0, 3, True, 5, 1)
    a = Request(2, 2, 1, False, 5, 1)
    b = Request(3, 1, 3, False, 5, 1)
    plan = plan_shared_route([d, a, b], 1, line)
    assert plan.total_km == route_oracle([d, a, b], d, line)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_route_is_permutation_optimal(seed, size):
    rng = np.random.default_rng(seed)
    zones = grid_zone_map(3, 3)
    members = []
    for k in range(size):
        o, dst = rng.choice(9, 2, replace=False)
        members.append(Request(k, int(o), int(dst), k == 0, 5, 1))
    plan = plan_shared_route(members, 0, zones)
    assert plan.total_km == pytest.approx(route_oracle(members, members[0], zones))
    for r in members:
        assert plan.per_member_time[r.id] >= zones.travel[r.origin, r.dest]
    assert plan.stops[0] == (members[0].origin, PICKUP, 0)
    assert plan.stops[-1] == (members[0].dest, DROPOFF, 0)
    co2, noise, traffic = env_benefits(plan, members, zones)
    assert co2 >= 0 and noise >= 0 and traffic == size - 1


def test_route_capacity_and_driver_checks(grid5):
    members = [Request(k, 0, 1, True, 5, 1) for k in range(6)]
    with pytest.raises(InvalidCarError):
        plan_shared_route(members, 0, grid5)
    with pytest.raises(InvalidCarError):
        plan_shared_route(members[:2], 9, grid5)


def test_env_singleton_is_zero(grid5):
    d = Request(1, 0, 12, True, 5, 1)
    assert env_benefits(plan_shared_route([d], 1, grid5), [d], grid5) == (0.0, 0.0, 0.0)


def test_env_two_identical_trips_save_one_trip():
    # a 5 km trip A->B
    zones = shortest_travel_times([(0, 1, 3, 5.0)])
    d = Request(1, 0, 1, True, 5, 1)
    r = Request(2, 0, 1, False, 5, 1)
    plan = plan_shared_route([d, r], 1, zones)
    km_saved = (zones.dist[0, 1] + zones.dist[0, 1]) - plan.total_km
    assert km_saved == 5.0
    assert env_benefits(plan, [d, r], zones) == (5.0, 5.0, 1.0)


def test_env_clamps_when_route_is_longer():
    # driver 0->1, rider 2->3 far away: the detour costs more than the rider's solo trip
    zones = shortest_travel_times([(0, 1, 1, 1.0), (1, 2, 1, 10.0), (2, 3, 1, 1.0)])
    d = Request(1, 0, 1, True, 5, 1)
    r = Request(2, 2, 3, False, 5, 1)
    plan = plan_shared_route([d, r], 1, zones)
    assert plan.total_km > zones.dist[0, 1] + zones.dist[2, 3]
    assert env_benefits(plan, [d, r], zones) == (0.0, 0.0, 1.0)
