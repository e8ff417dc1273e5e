"""Command-line driver: ``ridepool {ingest,synth,train,simulate,sweep}``.

Settings come from an optional flat ``key = value`` file (``--config``),
then command-line flags override them.  Recognised keys are listed by
``ridepool simulate --help``.  Outputs are CSV (plus a JSON summary per run).
Set ``RIDEPOOL_LOG`` to a logging level name (DEBUG, INFO, ...) for progress logs.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import experiments
from .city import ZoneMap, grid_zone_map, read_zone_file, read_zone_lookup
from .engine import SimConfig, compare_runs, run, write_step_csv, write_summary
from .errors import ConfigError, FormatError, InvalidInputError, RidepoolError
from .ingest import (DEFAULT_START, RequestStream, StreamPolicy, SynthConfig, build_stream, commuter_rates,
                     parse_trip_records, read_stream, synth_stream, write_stream)
from .lstm import TrainConfig, init_params, load_params, save_params, train
from .model import RewardWeights
from .predictor import fit_predictor, make_predictor
from .solver import SolverParams

logger = logging.getLogger("ridepool")

SIM_KEYS = {f.name for f in fields(SimConfig)} - {"solver", "weights", "predictor"}
SOLVER_KEYS = {f.name for f in fields(SolverParams)} - {"capacity", "seed"}
WEIGHT_KEYS = {f.name for f in fields(RewardWeights)}
CLI_PREDICTORS = ("none", "perfect", "yesterday", "lstm")

CONFIG_HELP = f"""config file keys (flat "key = value", '#' comments):
  simulation: {', '.join(sorted(SIM_KEYS))}
  solver:     {', '.join(sorted(SOLVER_KEYS))}
  reward:     {', '.join(sorted(WEIGHT_KEYS))}
defaults: f=0 capacity=5 max_wait=5 lookahead=true margin=0 driver_prob=0.5
  budget_ms=60000 d_rate=0.8 l_size=3 work_budget=3000 node_budget=20000
  generation_share=0.5 rho_*=1; the solver runs on wall-clock time unless
  --deterministic-budget (or deterministic = true) is given."""


def read_config(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SIM_KEYS | SOLVER_KEYS | WEIGHT_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        return type(like)(value)
    except ValueError:
        raise ConfigError(f"expected {type(like).__name__}, got {value!r}") from None


def sim_config(settings: dict[str, str], args) -> SimConfig:
    """Merge config-file settings with command-line overrides."""
    sim, solver, weights = SimConfig(), SolverParams(deterministic=False), RewardWeights()
    sim_kw = {k: _coerce(v, getattr(sim, k)) for k, v in settings.items() if k in SIM_KEYS}
    sol_kw = {k: _coerce(v, getattr(solver, k)) for k, v in settings.items() if k in SOLVER_KEYS}
    w_kw = {k: _coerce(v, getattr(weights, k)) for k, v in settings.items() if k in WEIGHT_KEYS}
    if getattr(args, "deterministic_budget", False):
        sol_kw["deterministic"] = True
    try:
        solver = replace(solver, **sol_kw)
        weights = replace(weights, **w_kw)
        return replace(sim, solver=solver, weights=weights, **sim_kw)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _kind_list(text: str) -> list[str]:
    kinds = [x.strip() for x in text.split(",") if x.strip()]
    for k in kinds:
        if k not in CLI_PREDICTORS:
            raise argparse.ArgumentTypeError(f"unknown predictor {k!r}; choose from {', '.join(CLI_PREDICTORS)}")
    return kinds


def load_stream(path) -> RequestStream:
    if path is None:
        raise ConfigError("--stream is required")
    if not Path(path).is_file():
        raise ConfigError(f"stream file {path} does not exist")
    return read_stream(path)


def load_zones(path, stream: RequestStream | None = None) -> ZoneMap:
    zones = read_zone_file(path) if path else grid_zone_map(5, 5)
    if stream is not None and stream.zone_count() > zones.n:
        raise ConfigError(f"stream uses {stream.zone_count()} zones, zone map has {zones.n}")
    return zones


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise ConfigError(f"expected a date YYYY-MM-DD, got {text!r}") from None


def _out_dir(path) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args) -> int:
    lookup = read_zone_lookup(args.lookup)
    day = _date(args.day)
    try:
        with open(args.input, newline="") as fh:
            parsed = parse_trip_records(fh, day, lookup)
    except OSError as exc:
        raise FormatError(f"cannot read {args.input}: {exc.strerror}") from None
    policy = StreamPolicy(driver_prob=args.driver_prob, max_wait=args.max_wait, step_seconds=args.step_seconds,
                          seed=args.seed)
    stream = build_stream(parsed.records, policy, day_label=day, n_zones=max(lookup.values()) + 1)
    write_stream(args.out, stream)
    print(f"records={len(parsed.records)} requests={len(stream)} skipped={parsed.skipped} "
          f"malformed={parsed.malformed} unmapped={parsed.unmapped} other_day={parsed.other_day} "
          f"same_zone={stream.dropped}")
    if parsed.malformed_rows:
        shown = ", ".join(map(str, parsed.malformed_rows[:20]))
        print(f"malformed rows: {shown}{' ...' if len(parsed.malformed_rows) > 20 else ''}")
    return 0


def cmd_synth(args) -> int:
    rates = commuter_rates(args.n_zones, steps_per_day=args.steps_per_day, daily_total=args.daily_total,
                           seed=args.rate_seed)
    start = _date(args.start) if args.start else DEFAULT_START
    cfg = SynthConfig(days=args.days, base_rates=rates, noise=args.noise, weekend_scale=args.weekend_scale,
                      seed=args.seed, driver_prob=args.driver_prob, max_wait=args.max_wait, start=start)
    stream = synth_stream(cfg)
    write_stream(args.out, stream)
    print(f"days={args.days} steps={stream.horizon} requests={len(stream)}")
    return 0


def cmd_train(args) -> int:
    stream = load_stream(args.stream)
    n = stream.zone_count()
    counts = stream.counts(n)
    spd = stream.steps_per_day
    if stream.n_days < 2:
        raise ConfigError(f"training needs at least 2 days of history, stream has {stream.n_days}")
    # keep the last day aside when that still leaves two days to train on
    held = stream.n_days >= 3
    fit_part = counts[: (stream.n_days - 1) * spd] if held else counts
    cfg = TrainConfig(window=args.window, learning_rate=args.learning_rate, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed, steps_per_day=spd)
    params, curve = train(init_params(n * n, args.hidden, seed=args.seed), fit_part, cfg)
    out = _out_dir(args.out)
    save_params(out / "lstm_params.txt", params)
    with open(out / "loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for k, loss in enumerate(curve, 1):
            fh.write(f"{k},{loss!r}\n")
    if held:
        warm, scored = fit_part, counts[len(fit_part):]
    else:
        warm, scored = counts[:-spd], counts[-spd:]
    cell, total = experiments.held_out_smape(params, warm, scored, window=args.window, steps_per_day=spd)
    what = "held-out last day" if held else "last training day (in-sample)"
    print(f"final_loss={curve[-1]:.6g} smape_cell={cell:.4f} smape_total={total:.4f} ({what})")
    return 0


def cmd_simulate(args) -> int:
    settings = read_config(args.config)
    stream = load_stream(args.stream)
    zones = load_zones(args.zones, stream)
    cfg = sim_config(settings, args)
    if args.horizon is not None:
        cfg = replace(cfg, f=args.horizon)
    kind = args.predictor or ("perfect" if cfg.f > 0 else "none")
    if kind == "none" and cfg.f > 0:
        raise ConfigError(f"--horizon {cfg.f} needs a predictor")
    if kind != "none" and cfg.f == 0:
        raise ConfigError(f"predictor {kind} needs --horizon >= 1")
    params = load_params(args.params) if args.params else None
    if kind == "lstm" and params is None:
        raise ConfigError("the lstm predictor needs --params")
    cfg = replace(cfg, predictor=kind)
    seeds = args.seed or [cfg.seed]
    out = _out_dir(args.out)
    for s in seeds:
        scfg = replace(cfg, seed=s)
        pred = None
        if kind != "none":
            pred = fit_predictor(make_predictor(kind, period=stream.steps_per_day, params=params, seed=s),
                                 stream, np.zeros((0, zones.n, zones.n), dtype=np.int64))
        rep = run(stream, scfg, zones, pred, label=kind if cfg.f else "baseline")
        write_step_csv(out / f"steps_seed{s}.csv", rep)
        extra = {"seed": s, "f": cfg.f, "predictor": kind}
        msg = f"seed={s} total_reward={rep.total_reward:.6g} served={rep.served_fraction:.4f} " \
              f"pool={rep.average_pool_size:.4f}"
        if args.compare and cfg.f > 0:
            base = run(stream, replace(scfg, f=0, predictor="none"), zones, None, label="baseline")
            write_step_csv(out / f"steps_baseline_seed{s}.csv", base)
            imp = compare_runs(base, rep)
            extra["baseline_total_reward"] = base.total_reward
            extra["improvement_percent"] = imp
            msg += " improvement=" + ("undefined" if imp is None else f"{imp:+.2f}%")
        write_summary(out / f"summary_seed{s}.json", rep, extra)
        print(msg)
    return 0


def cmd_sweep(args) -> int:
    settings = read_config(args.config)
    stream = load_stream(args.stream)
    zones = load_zones(args.zones, stream)
    cfg = sim_config(settings, args)
    kinds = args.predictor or ["perfect"]
    horizons = args.horizon or [1, 2, 3, 4, 5]
    treatments = [experiments.Treatment(k, f) for k in kinds if k != "none" for f in horizons]
    if not treatments:
        raise ConfigError("sweep needs at least one predictor other than 'none'")
    params = load_params(args.params) if args.params else None
    seeds = args.seed or [cfg.seed]
    days = args.days
    if days is not None:
        bad = [d for d in days if not 0 <= d < stream.n_days]
        if bad:
            raise ConfigError(f"days {bad} outside stream of {stream.n_days} days")
    results = experiments.sweep(stream, zones, treatments, cfg, seeds, args.jobs, params, days)
    imp, pool, acc = experiments.sweep_tables(stream, results, treatments)
    out = _out_dir(args.out)
    experiments.write_rows(out / "improvement.csv", imp)
    experiments.write_rows(out / "pool_size.csv", pool)
    experiments.write_rows(out / "smape.csv", acc)
    means = experiments.mean_improvements(results)
    with open(out / "sweep_summary.json", "w") as fh:
        json.dump({"mean_improvement_percent": means, "runs": len(results)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for label, v in sorted(means.items()):
        print(f"{label}: mean improvement {v:+.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ridepool", description="Peer-to-peer ridesharing with demand forecasts.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("ingest", help="convert one day of TLC trip records into a stream file")
    g.add_argument("input", help="TLC yellow-taxi CSV")
    g.add_argument("--day", required=True, help="date to keep, YYYY-MM-DD")
    g.add_argument("--lookup", help="'location_id zone' file (default: bundled Manhattan 5x5 lookup)")
    g.add_argument("--out", required=True, help="stream file to write")
    g.add_argument("--driver-prob", type=float, default=0.5)
    g.add_argument("--max-wait", type=int, default=5)
    g.add_argument("--step-seconds", type=int, default=60)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_ingest)

    g = sub.add_parser("synth", help="write a synthetic commuter stream")
    g.add_argument("--days", type=int, default=7)
    g.add_argument("--n-zones", type=int, default=25)
    g.add_argument("--steps-per-day", type=int, default=1440)
    g.add_argument("--daily-total", type=float, default=200.0, help="expected requests per weekday")
    g.add_argument("--weekend-scale", type=float, default=1.0)
    g.add_argument("--noise", choices=("poisson", "none"), default="poisson")
    g.add_argument("--driver-prob", type=float, default=0.5)
    g.add_argument("--max-wait", type=int, default=5)
    g.add_argument("--start", help="first day, YYYY-MM-DD (default 2019-06-01)")
    g.add_argument("--seed", type=int, default=0, help="noise and driver-flag seed")
    g.add_argument("--rate-seed", type=int, default=0, help="seed of the commuter rate template")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_synth)

    g = sub.add_parser("train", help="train the LSTM forecaster on a stream (>= 2 days)")
    g.add_argument("--stream", required=True)
    g.add_argument("--hidden", type=int, default=32)
    g.add_argument("--window", type=int, default=30)
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=8)
    g.add_argument("--learning-rate", type=float, default=1e-2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output directory (default .)")
    g.set_defaults(func=cmd_train)

    for name, helptext in (("simulate", "run the online simulation once per seed"),
                           ("sweep", "per-day baseline vs forecast runs over a multi-day stream")):
        g = sub.add_parser(name, help=helptext, epilog=CONFIG_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        g.add_argument("--stream", help="stream file (from ingest or synth)")
        g.add_argument("--zones", help="'a b steps km' edge file (default: 5x5 grid, 1 step and 1 km per edge)")
        g.add_argument("--config", help="flat key = value settings file")
        g.add_argument("--seed", type=_int_list, help="seed or comma-separated seeds")
        g.add_argument("--deterministic-budget", action="store_true",
                       help="count solver work units instead of wall-clock time (reproducible)")
        g.add_argument("--params", help="LSTM parameter file (from train)")
        g.add_argument("--out", help="output directory (default .)")
        if name == "simulate":
            g.add_argument("--predictor", choices=CLI_PREDICTORS)
            g.add_argument("--horizon", type=int, help="forecast horizon f")
            g.add_argument("--compare", action="store_true", help="also run the f=0 baseline and print the improvement")
            g.set_defaults(func=cmd_simulate)
        else:
            g.add_argument("--predictor", type=_kind_list, help="comma-separated predictors (default perfect)")
            g.add_argument("--horizon", type=_int_list, help="comma-separated horizons (default 1,2,3,4,5)")
            g.add_argument("--days", type=_int_list, help="0-based day indices (default all)")
            g.add_argument("--jobs", type=int, default=1, help="worker processes")
            g.set_defaults(func=cmd_sweep)
    return p


def _setup_logging():
    level = os.environ.get("RIDEPOOL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"ridepool {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"ridepool {args.command}: format error: {exc}", file=sys.stderr)
        return 3
    except RidepoolError as exc:
        print(f"ridepool {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
