"""Core value types and pure helpers shared across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence, Tuple

import numpy as np

MINUTES_PER_DAY = 1440

Point = Tuple[float, float]
PriceSegment = Tuple[int, int, float]


class ConfigError(ValueError):
    """Raised when a scenario or configuration violates its invariants."""


@dataclass(frozen=True)
class StationSpec:
    id: int
    location: Point
    capacity: int
    power: float
    price_schedule: Tuple[PriceSegment, ...]

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"station {self.id}: capacity must be >= 1")
        if not self.power > 0:
            raise ConfigError(f"station {self.id}: power must be > 0")
        object.__setattr__(
            self, "price_schedule",
            tuple((int(a), int(b), float(p)) for a, b, p in self.price_schedule))
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))
        validate_schedule(self.price_schedule, self.id)


def validate_schedule(schedule: Sequence[PriceSegment], station_id=None) -> None:
    """Check that segments partition [0, 1440) with positive prices."""
    tag = f"station {station_id}: " if station_id is not None else ""
    if not schedule:
        raise ConfigError(f"{tag}empty price schedule")
    segs = sorted(schedule)
    cursor = 0
    for start, end, price in segs:
        if start > cursor:
            raise ConfigError(f"{tag}price schedule gap ({cursor},{start})")
        if start < cursor:
            raise ConfigError(f"{tag}price schedule overlap at minute {start}")
        if end <= start:
            raise ConfigError(f"{tag}empty price segment ({start},{end})")
        if not price > 0:
            raise ConfigError(f"{tag}non-positive price {price}")
        cursor = end
    if cursor != MINUTES_PER_DAY:
        raise ConfigError(f"{tag}price schedule gap ({cursor},{MINUTES_PER_DAY})")


@dataclass(frozen=True)
class ChargingRequest:
    id: int
    arrival_minute: int
    location: Point
    energy: float
    ground_truth_station: int

    def __post_init__(self):
        if not 0 <= self.arrival_minute < MINUTES_PER_DAY:
            raise ConfigError(f"request {self.id}: arrival minute out of range")
        if not self.energy > 0:
            raise ConfigError(f"request {self.id}: energy must be > 0")
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))


@dataclass(frozen=True)
class ChargeOutcome:
    """Settled result of one request.

    ``finish_minute`` is the request's finish time: the minute charging
    started (success) or the minute the wait threshold was crossed
    (failure).  ``cp`` is the price paid on success and the price at the
    station when it was given up on failure.
    """

    request_id: int
    recommended_station: Optional[int]
    station: int
    accepted: bool
    success: bool
    cwt: int
    cp: float
    energy: float
    arrival_minute: int
    finish_minute: int
    reference_cp: float = float("nan")


@dataclass(frozen=True)
class Observation:
    station_index: int
    time: int
    supply: int
    future_demand: int
    power: float
    eta: int
    cp_at_eta: float


@dataclass(frozen=True)
class FeatureScales:
    """Per-scenario constants used to map observations into [-1, 1]."""

    n_stations: int
    max_power: float
    max_price: float
    demand_cap: float
    fail_threshold: int


OBS_DIM = 8


def normalize(obs: Observation, capacity: int, scales: FeatureScales) -> np.ndarray:
    """Feature vector for the actor and critics; every entry lies in [-1, 1]."""
    n = scales.n_stations
    idx = 0.0 if n <= 1 else 2.0 * obs.station_index / (n - 1) - 1.0
    angle = 2.0 * math.pi * (obs.time % MINUTES_PER_DAY) / MINUTES_PER_DAY
    vec = np.array([
        idx,
        math.sin(angle),
        math.cos(angle),
        obs.supply / capacity,
        obs.future_demand / scales.demand_cap,
        obs.power / scales.max_power,
        obs.eta / scales.fail_threshold,
        obs.cp_at_eta / scales.max_price,
    ])
    return np.clip(vec, -1.0, 1.0)


@dataclass(frozen=True)
class Action:
    bid: float


@dataclass(frozen=True)
class CompetitionTrace:
    values: Tuple[int, ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    d: int = 30
    sigma: float = 0.2
    tau: float = 0.001
    k: int = 50
    buffer_capacity: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    eps_cwt: float = -60.0
    eps_cp: float = -2.8
    fail_threshold: int = 45
    accept_prob: float = 1.0
    iterations: int = 60
    seed: int = 0
    # exploration noise std on bids, decayed linearly over iterations
    noise_start: float = 0.1
    noise_end: float = 0.01
    hidden: int = 64
    trace_dim: int = 16
    attention_dim: int = 32
    demand_cap: float = 10.0
    # reward multipliers applied before critic regression; 0 means 1/|eps|
    cwt_scale: float = 0.0
    cp_scale: float = 0.0
    use_trace: bool = True
    # L2 penalty on the actor's pre-tanh bid
    preact_reg: float = 1e-3
    warmup: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if not 0 <= self.accept_prob <= 1:
            raise ConfigError("accept_prob must lie in [0, 1]")
        if self.buffer_capacity < 1 or self.batch_size < 1:
            raise ConfigError("buffer_capacity and batch_size must be >= 1")
        if self.preact_reg < 0:
            raise ConfigError("preact_reg must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    @property
    def reward_scales(self) -> Tuple[float, float]:
        cwt = self.cwt_scale or 1.0 / abs(self.eps_cwt)
        cp = self.cp_scale or 1.0 / abs(self.eps_cp)
        return cwt, cp

    def to_dict(self) -> dict:
        return asdict(self)


def eta(src: Point, dst: Point, speed: float) -> int:
    """Travel time in whole minutes, straight line at constant speed."""
    dist = math.hypot(src[0] - dst[0], src[1] - dst[1])
    # guard against 5.000000001-style float noise pushing ceil up a minute
    return int(math.ceil(round(dist / speed * 60.0, 9)))


def price_at(spec: StationSpec, minute: int) -> float:
    m = minute % MINUTES_PER_DAY
    for start, end, price in spec.price_schedule:
        if start <= m < end:
            return price
    raise ConfigError(f"station {spec.id}: no price segment for minute {m}")


def reward_pair(outcome: ChargeOutcome, cfg: TrainConfig) -> Tuple[float, float]:
    if not outcome.accepted:
        raise ValueError(f"request {outcome.request_id} did not accept the recommendation")
    if outcome.success:
        return -float(outcome.cwt), -float(outcome.cp)
    return float(cfg.eps_cwt), float(cfg.eps_cp)


def discounted_return(settlements, t_minute: int, gamma: float) -> float:
    """Sum of gamma**(finish - t - 1) * reward over (finish, reward) pairs."""
    total = 0.0
    for finish, reward in settlements:
        if finish <= t_minute:
            raise ValueError(f"settlement at {finish} is not after t={t_minute}")
        total += gamma ** (finish - t_minute - 1) * reward
    return total
