import datetime as dt
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ridepool.errors import ConfigError, FormatError
from ridepool.ingest import (StreamPolicy, SynthConfig, TripRecord, build_stream, commuter_rates, parse_trip_records,
                             read_stream, stream_from_requests, synth_stream, write_stream)
from ridepool.model import Request

HEADER = ("VendorID,tpep_pickup_datetime,tpep_dropoff_datetime,passenger_count,trip_distance,"
          "PULocationID,DOLocationID\n")
DAY = dt.date(2019, 6, 3)
LOOKUP = {161: 12, 237: 17, 43: 13}


def csv_text(*rows):
    return io.StringIO(HEADER + "".join(r + "\n" for r in rows))


def test_parse_mapped_row():
    res = parse_trip_records(csv_text("1,2019-06-03 08:15:22,2019-06-03 08:30:00,1,2.1,161,237"), DAY, LOOKUP)
    assert res.records == [TripRecord(dt.datetime(2019, 6, 3, 8, 15, 22), 161, 237, 12, 17)]
    assert res.skipped == 0


def test_parse_unmapped_malformed_and_other_day():
    res = parse_trip_records(csv_text(
        "1,2019-06-03 08:15:22,x,1,2.1,161,999",
        "1,not a date,x,1,2.1,161,237",
        "1,2019-06-03 09:00:00,x,1,2.1,,237",
        "1,2019-06-04 09:00:00,x,1,2.1,161,237",
        "1,2019-06-03 10:00:00,x,1,2.1,43,161",
    ), DAY, LOOKUP)
    assert res.unmapped == 1
    assert res.malformed == 2 and res.malformed_rows == [3, 4]
    assert res.other_day == 1
    assert len(res.records) == 1 and res.skipped == 3


def test_parse_empty_file():
    assert parse_trip_records(io.StringIO(HEADER), DAY, LOOKUP).records == []


def test_parse_missing_column_is_named():
    with pytest.raises(FormatError, match="DOLocationID"):
        parse_trip_records(io.StringIO("tpep_pickup_datetime,PULocationID\n"), DAY, LOOKUP)


def rec(h, m, s, pu=12, do=17):
    return TripRecord(dt.datetime(2019, 6, 3, h, m, s), 0, 0, pu, do)


def test_bin_boundary():
    stream = build_stream([rec(0, 0, 59), rec(0, 1, 0), rec(23, 59, 59)], StreamPolicy())
    assert [r.arrival for r in stream.requests()] == [1, 2, 1440]
    assert stream.horizon == 1440


def test_driver_prob_one_and_determinism():
    recs = [rec(8, k, 0) for k in range(30)]
    assert all(r.is_driver for r in build_stream(recs, StreamPolicy(driver_prob=1.0)).requests())
    a = build_stream(recs, StreamPolicy(seed=4))
    b = build_stream(recs, StreamPolicy(seed=4))
    assert a == b


def test_same_zone_dropped():
    stream = build_stream([rec(1, 0, 0, 3, 3), rec(1, 0, 0, 3, 4)], StreamPolicy())
    assert len(stream) == 1 and stream.dropped == 1


@given(st.lists(st.tuples(st.integers(0, 86399), st.integers(0, 4), st.integers(0, 4)), max_size=40),
       st.integers(0, 5))
def test_build_preserves_count_and_range(trips, seed):
    recs = [TripRecord(dt.datetime(2019, 6, 3) + dt.timedelta(seconds=s), 0, 0, a, b) for s, a, b in trips]
    stream = build_stream(recs, StreamPolicy(seed=seed))
    assert len(stream) == len(recs) - stream.dropped
    assert all(1 <= r.arrival <= stream.horizon for r in stream.requests())
    assert stream == build_stream(recs, StreamPolicy(seed=seed))


def test_policy_validation():
    with pytest.raises(ConfigError):
        StreamPolicy(driver_prob=1.5)


def flat_rates(steps, n, value):
    rates = np.full((steps, n, n), float(value))
    for k in range(steps):
        np.fill_diagonal(rates[k], 0)
    return rates


def test_noise_none_reproduces_rates_every_day():
    rates = flat_rates(6, 3, 2)
    rates[2] = 0
    stream = synth_stream(SynthConfig(days=3, base_rates=rates, noise="none"))
    counts = stream.counts(3)
    for d in range(3):
        assert np.array_equal(counts[d * 6:(d + 1) * 6], rates.astype(np.int64))
    day1, day2 = stream.day(0), stream.day(1)
    assert [(r.origin, r.dest, r.arrival) for r in day1.requests()] == \
        [(r.origin, r.dest, r.arrival) for r in day2.requests()]
    assert day2.day_label == day1.day_label + dt.timedelta(days=1)


def test_poisson_mean_within_three_standard_errors():
    lam = 2.5
    rates = np.zeros((100, 2, 2))
    rates[:, 0, 1] = lam
    stream = synth_stream(SynthConfig(days=100, base_rates=rates, seed=7))
    draws = stream.counts(2)[:, 0, 1]
    assert draws.size >= 10_000
    se = np.sqrt(lam / draws.size)
    assert abs(draws.mean() - lam) < 3 * se


def test_weekend_scale_applies_to_configured_days():
    rates = flat_rates(4, 2, 3)
    stream = synth_stream(SynthConfig(days=3, base_rates=rates, noise="none", weekend_scale=2.0))
    totals = stream.counts(2).reshape(3, 4, -1).sum(axis=(1, 2))
    assert totals.tolist() == [48, 48, 24]


@pytest.mark.parametrize("rates", [np.zeros((4, 2, 3)), -np.ones((2, 2, 2)), np.ones((2, 2, 2))])
def test_synth_rejects_bad_rates(rates):
    with pytest.raises(ConfigError):
        synth_stream(SynthConfig(days=1, base_rates=rates))


def test_synth_rejects_dimension_mismatch():
    with pytest.raises(ConfigError):
        synth_stream(SynthConfig(days=1, base_rates=flat_rates(4, 2, 1), n_zones=3))


def test_commuter_rates_shape_and_total():
    rates = commuter_rates(25, daily_total=200)
    assert rates.shape == (1440, 25, 25)
    assert rates.sum() == pytest.approx(200)
    assert np.all(np.einsum("kii->ki", rates) == 0)


def test_stream_file_round_trip(tmp_path):
    stream = synth_stream(SynthConfig(days=2, base_rates=flat_rates(5, 3, 1), seed=3))
    p = tmp_path / "s.txt"
    write_stream(p, stream)
    again = read_stream(p)
    assert again == stream
    p.write_text("# horizon=2\n1 0 0 1 1\n")
    with pytest.raises(FormatError):
        read_stream(p)


def test_day_slicing_rebases_arrivals():
    reqs = [Request(0, 0, 1, True, 5, 3), Request(1, 0, 1, True, 5, 7)]
    stream = stream_from_requests(reqs, 10, steps_per_day=5)
    assert stream.n_days == 2
    assert [r.arrival for r in stream.day(1).requests()] == [2]
    with pytest.raises(IndexError):
        stream.day(2)
