"""Peer-to-peer ridesharing with demand forecasts.

Requests arrive step by step; an optimiser groups them into shared cars,
optionally using forecast requests to hold back cars that a near-future
arrival would improve.
"""

from .city import ZoneMap, grid_zone_map, plan_shared_route, read_zone_file, shortest_travel_times
from .engine import RunReport, SimConfig, compare_runs, run, step
from .errors import (ConfigError, FormatError, InvalidCarError, InvalidComparisonError, InvalidInputError,
                     NumericOverflowError, RidepoolError, SimulationError)
from .ingest import RequestStream, SynthConfig, commuter_rates, read_stream, synth_stream, write_stream
from .model import Car, Request, RewardWeights, car_reward, quality_of_service
from .predictor import (LstmPredictor, PerfectPredictor, ScrambledPredictor, YesterdayPredictor, make_predictor,
                        smape)
from .solver import SolverParams, brute_force_packing, generate_candidates, solve_packing

__version__ = "0.1.0"

__all__ = [
    "Car", "ConfigError", "FormatError", "InvalidCarError", "InvalidComparisonError", "InvalidInputError",
    "LstmPredictor", "NumericOverflowError", "PerfectPredictor", "Request", "RequestStream", "RewardWeights",
    "RidepoolError", "RunReport", "ScrambledPredictor", "SimConfig", "SimulationError", "SolverParams",
    "SynthConfig", "YesterdayPredictor", "ZoneMap", "brute_force_packing", "car_reward", "commuter_rates",
    "compare_runs", "generate_candidates", "grid_zone_map", "make_predictor", "plan_shared_route",
    "quality_of_service", "read_stream", "read_zone_file", "run", "shortest_travel_times", "smape",
    "solve_packing", "step", "synth_stream", "write_stream",
]
