"""Multi-objective EV charging station recommendation on a minute-level simulator."""

from .domain import (
    ChargeOutcome,
    ChargingRequest,
    ConfigError,
    StationSpec,
    TrainConfig,
    discounted_return,
    eta,
    price_at,
    reward_pair,
)
from .metrics import MetricsReport, compare, compute_metrics, emit
from .scenario import GeneratorConfig, Scenario, generate, load, reference_config, save
from .simulator import EventLog, Simulation, run_days, run_episode

__version__ = "0.1.0"
