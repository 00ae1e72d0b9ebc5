"""Synthetic scenario generation, CSV persistence and future-demand counts."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .domain import (
    MINUTES_PER_DAY,
    ChargingRequest,
    ConfigError,
    StationSpec,
    eta,
    validate_schedule,
)

DEMAND_WINDOW = 15

STATIONS_HEADER = ["id", "x_km", "y_km", "capacity", "power_kw"]
PRICES_HEADER = ["station_id", "start_minute", "end_minute", "cny_per_kwh"]
REQUESTS_HEADER = ["day", "id", "minute", "x_km", "y_km", "kwh", "gt_station_id"]


@dataclass(frozen=True)
class Scenario:
    stations: Tuple[StationSpec, ...]
    episodes: Tuple[Tuple[ChargingRequest, ...], ...]
    grid_cell_km: float = 1.0
    speed: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        object.__setattr__(self, "episodes", tuple(tuple(day) for day in self.episodes))
        if not self.stations:
            raise ConfigError("scenario has no stations")
        for i, st in enumerate(self.stations):
            if st.id != i:
                raise ConfigError(f"station ids must be dense 0..N-1, got {st.id} at {i}")
        n = len(self.stations)
        for d, day in enumerate(self.episodes):
            prev = None
            for req in day:
                key = (req.arrival_minute, req.id)
                if prev is not None and key <= prev:
                    raise ConfigError(f"day {d}: requests not sorted at request {req.id}")
                prev = key
                if not 0 <= req.ground_truth_station < n:
                    raise ConfigError(f"request {req.id}: unknown station {req.ground_truth_station}")
        if not self.speed > 0 or not self.grid_cell_km > 0:
            raise ConfigError("speed and grid_cell_km must be > 0")

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def n_days(self) -> int:
        return len(self.episodes)

    def etas_from(self, point) -> np.ndarray:
        return np.array([eta(point, st.location, self.speed) for st in self.stations])

    def cell(self, point) -> Tuple[int, int]:
        return (math.floor(point[0] / self.grid_cell_km), math.floor(point[1] / self.grid_cell_km))


def default_demand_curve(mean_rate: float, peak_ratio: float = 3.0) -> np.ndarray:
    """Per-minute intensity with morning and evening peaks, averaging ``mean_rate``."""
    m = np.arange(MINUTES_PER_DAY, dtype=float)
    shape = (0.25
             + peak_ratio * np.exp(-0.5 * ((m - 8.5 * 60) / 75.0) ** 2)
             + peak_ratio * np.exp(-0.5 * ((m - 18.5 * 60) / 90.0) ** 2)
             + 0.8 * np.exp(-0.5 * ((m - 13 * 60) / 120.0) ** 2))
    # quiet small hours
    shape *= np.where((m < 5 * 60), 0.3, 1.0)
    return shape * (mean_rate / shape.mean())


@dataclass(frozen=True)
class GeneratorConfig:
    n_stations: int = 10
    n_days: int = 27
    city_extent: float = 20.0
    capacity_range: Tuple[int, int] = (2, 2)
    power_choices: Tuple[float, ...] = (30.0, 60.0, 120.0)
    offpeak_price_range: Tuple[float, float] = (0.6, 1.8)
    peak_price_range: Tuple[float, float] = (1.2, 2.6)
    peak_windows: Tuple[Tuple[int, int], ...] = ((420, 660), (1020, 1260))
    mean_rate: float = 0.15
    demand_curve: Optional[Tuple[float, ...]] = None
    energy_mean: float = 30.0
    energy_std: float = 8.0
    energy_min: float = 5.0
    cluster_fraction: float = 0.8
    cluster_sigma: float = 1.0
    # Dirichlet concentration of station popularity; small = strong hotspots
    popularity_concentration: float = 1.0
    grid_cell_km: float = 1.0
    speed: float = 30.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.capacity_range
        if self.n_stations < 1:
            raise ConfigError("n_stations must be >= 1")
        if self.n_days < 0:
            raise ConfigError("n_days must be >= 0")
        if lo < 1 or hi < lo:
            raise ConfigError("capacity_range must be non-empty with minimum >= 1")
        if not self.power_choices or min(self.power_choices) <= 0:
            raise ConfigError("power_choices must be non-empty and positive")
        for name in ("offpeak_price_range", "peak_price_range"):
            a, b = getattr(self, name)
            if a <= 0 or b < a:
                raise ConfigError(f"{name} must be a non-empty positive range")
        if self.city_extent <= 0:
            raise ConfigError("city_extent must be > 0")
        if not 0 <= self.cluster_fraction <= 1:
            raise ConfigError("cluster_fraction must lie in [0, 1]")
        curve = self.intensity()
        if curve.shape != (MINUTES_PER_DAY,) or np.any(curve < 0) or not np.all(np.isfinite(curve)):
            raise ConfigError("demand curve must have 1440 finite non-negative entries")
        if curve.sum() <= 0:
            raise ConfigError("expected demand is zero")

    def intensity(self) -> np.ndarray:
        if self.demand_curve is not None:
            return np.asarray(self.demand_curve, dtype=float)
        return default_demand_curve(self.mean_rate)


def _price_schedule(rng, cfg: GeneratorConfig):
    """Station-specific time-of-use schedule: peak windows at a peak price."""
    level = rng.uniform(0.0, 1.0)
    off = cfg.offpeak_price_range[0] + level * (cfg.offpeak_price_range[1] - cfg.offpeak_price_range[0])
    peak = cfg.peak_price_range[0] + level * (cfg.peak_price_range[1] - cfg.peak_price_range[0])
    off, peak = round(off, 3), round(peak, 3)
    segs = []
    cursor = 0
    for start, end in sorted(cfg.peak_windows):
        if start > cursor:
            segs.append((cursor, start, off))
        segs.append((start, end, peak))
        cursor = end
    if cursor < MINUTES_PER_DAY:
        segs.append((cursor, MINUTES_PER_DAY, off))
    return tuple(segs)


def nearest_station(stations: Sequence[StationSpec], point, speed: float) -> int:
    best = min(stations, key=lambda st: (eta(point, st.location, speed),
                                         math.hypot(point[0] - st.location[0], point[1] - st.location[1]),
                                         st.id))
    return best.id


def generate(cfg: GeneratorConfig) -> Scenario:
    rng = np.random.default_rng(cfg.seed)
    ext = cfg.city_extent
    stations = []
    for i in range(cfg.n_stations):
        x, y = rng.uniform(0.0, ext, size=2)
        cap = int(rng.integers(cfg.capacity_range[0], cfg.capacity_range[1] + 1))
        power = float(cfg.power_choices[int(rng.integers(len(cfg.power_choices)))])
        stations.append(StationSpec(
            id=i, location=(round(float(x), 4), round(float(y), 4)), capacity=cap,
            power=power, price_schedule=_price_schedule(rng, cfg)))

    popularity = rng.dirichlet(np.full(cfg.n_stations, cfg.popularity_concentration))
    lam = cfg.intensity()
    episodes = []
    next_id = 0
    for _ in range(cfg.n_days):
        counts = rng.poisson(lam)
        day = []
        for minute in np.nonzero(counts)[0]:
            for _ in range(int(counts[minute])):
                if rng.uniform() < cfg.cluster_fraction:
                    hub = stations[int(rng.choice(cfg.n_stations, p=popularity))]
                    x, y = rng.normal(hub.location, cfg.cluster_sigma)
                else:
                    x, y = rng.uniform(0.0, ext, size=2)
                x = float(np.clip(x, 0.0, ext))
                y = float(np.clip(y, 0.0, ext))
                loc = (round(x, 4), round(y, 4))
                energy = max(cfg.energy_min, float(rng.normal(cfg.energy_mean, cfg.energy_std)))
                day.append(ChargingRequest(
                    id=next_id, arrival_minute=int(minute), location=loc,
                    energy=round(energy, 3),
                    ground_truth_station=nearest_station(stations, loc, cfg.speed)))
                next_id += 1
        episodes.append(tuple(day))
    return Scenario(tuple(stations), tuple(episodes), cfg.grid_cell_km, cfg.speed)


# ---- persistence ------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def save(scenario: Scenario, dir_path) -> None:
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATIONS_HEADER)
        for st in scenario.stations:
            w.writerow([st.id, _fmt(st.location[0]), _fmt(st.location[1]), st.capacity, _fmt(st.power)])
    with open(out / "prices.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICES_HEADER)
        for st in scenario.stations:
            for start, end, price in st.price_schedule:
                w.writerow([st.id, start, end, _fmt(price)])
    with open(out / "requests.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUESTS_HEADER)
        for d, day in enumerate(scenario.episodes):
            for r in day:
                w.writerow([d, r.id, r.arrival_minute, _fmt(r.location[0]), _fmt(r.location[1]),
                            _fmt(r.energy), r.ground_truth_station])
    meta = out / "scenario.csv"
    with open(meta, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_cell_km", "speed_kmh", "n_days"])
        w.writerow([_fmt(float(scenario.grid_cell_km)), _fmt(float(scenario.speed)), scenario.n_days])


def _rows(path: Path, header):
    if not path.exists():
        raise ConfigError(f"missing file {path.name}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise ConfigError(f"{path.name}: empty file, header required") from None
        if [h.strip() for h in got] != header:
            raise ConfigError(f"{path.name}:1: header {got} != {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path.name}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _parse(path_name, lineno, kind, text):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{path_name}:{lineno}: cannot parse {text!r} as {kind.__name__}") from None


def load(dir_path) -> Scenario:
    src = Path(dir_path)
    grid, speed, n_days = 1.0, 30.0, None
    meta = src / "scenario.csv"
    if meta.exists():
        for lineno, row in _rows(meta, ["grid_cell_km", "speed_kmh", "n_days"]):
            grid = _parse(meta.name, lineno, float, row[0])
            speed = _parse(meta.name, lineno, float, row[1])
            n_days = _parse(meta.name, lineno, int, row[2])

    raw_stations = {}
    for lineno, row in _rows(src / "stations.csv", STATIONS_HEADER):
        sid = _parse("stations.csv", lineno, int, row[0])
        if sid in raw_stations:
            raise ConfigError(f"stations.csv:{lineno}: duplicate station id {sid}")
        raw_stations[sid] = (lineno,
                             (_parse("stations.csv", lineno, float, row[1]),
                              _parse("stations.csv", lineno, float, row[2])),
                             _parse("stations.csv", lineno, int, row[3]),
                             _parse("stations.csv", lineno, float, row[4]))

    schedules = {sid: [] for sid in raw_stations}
    for lineno, row in _rows(src / "prices.csv", PRICES_HEADER):
        sid = _parse("prices.csv", lineno, int, row[0])
        if sid not in schedules:
            raise ConfigError(f"prices.csv:{lineno}: unknown station id {sid}")
        schedules[sid].append((_parse("prices.csv", lineno, int, row[1]),
                               _parse("prices.csv", lineno, int, row[2]),
                               _parse("prices.csv", lineno, float, row[3])))

    stations = []
    for expect, sid in enumerate(sorted(raw_stations)):
        lineno, loc, cap, power = raw_stations[sid]
        if sid != expect:
            raise ConfigError(f"stations.csv:{lineno}: station ids must be dense 0..N-1")
        try:
            validate_schedule(schedules[sid], sid)
            stations.append(StationSpec(sid, loc, cap, power, tuple(schedules[sid])))
        except ConfigError as exc:
            raise ConfigError(f"prices.csv: {exc}") from None

    days = {}
    last = {}
    for lineno, row in _rows(src / "requests.csv", REQUESTS_HEADER):
        day = _parse("requests.csv", lineno, int, row[0])
        rid = _parse("requests.csv", lineno, int, row[1])
        minute = _parse("requests.csv", lineno, int, row[2])
        gt = _parse("requests.csv", lineno, int, row[6])
        if day < 0:
            raise ConfigError(f"requests.csv:{lineno}: negative day")
        if not 0 <= gt < len(stations):
            raise ConfigError(f"requests.csv:{lineno}: unknown ground-truth station {gt}")
        key = (minute, rid)
        if day in last and key <= last[day]:
            raise ConfigError(f"requests.csv:{lineno}: requests out of order within day {day}")
        last[day] = key
        try:
            req = ChargingRequest(rid, minute,
                                  (_parse("requests.csv", lineno, float, row[3]),
                                   _parse("requests.csv", lineno, float, row[4])),
                                  _parse("requests.csv", lineno, float, row[5]), gt)
        except ConfigError as exc:
            raise ConfigError(f"requests.csv:{lineno}: {exc}") from None
        days.setdefault(day, []).append(req)
    total = max([n_days or 0] + [d + 1 for d in days])
    episodes = tuple(tuple(days.get(d, ())) for d in range(total))
    return Scenario(tuple(stations), episodes, grid, speed)


# ---- future demand ----------------------------------------------------------

def _neighbours(scenario: Scenario, station: StationSpec, point) -> bool:
    cx, cy = scenario.cell(station.location)
    px, py = scenario.cell(point)
    return abs(cx - px) <= 1 and abs(cy - py) <= 1


def future_demand(scenario: Scenario, day: int, station: int, minute: int) -> int:
    """Requests arriving in (minute, minute + 15] inside the station's 3x3 cell block."""
    st = scenario.stations[station]
    return sum(1 for r in scenario.episodes[day]
               if minute < r.arrival_minute <= minute + DEMAND_WINDOW and _neighbours(scenario, st, r.location))


def demand_table(scenario: Scenario, day: int) -> np.ndarray:
    """(N, 1440) array of future_demand for every station and minute."""
    n = scenario.n_stations
    hits = np.zeros((n, MINUTES_PER_DAY + DEMAND_WINDOW + 1), dtype=np.int64)
    cells = [scenario.cell(st.location) for st in scenario.stations]
    for r in scenario.episodes[day]:
        px, py = scenario.cell(r.location)
        for i, (cx, cy) in enumerate(cells):
            if abs(cx - px) <= 1 and abs(cy - py) <= 1:
                hits[i, r.arrival_minute] += 1
    csum = np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(hits, axis=1)], axis=1)
    m = np.arange(MINUTES_PER_DAY)
    # sum over arrivals a with m < a <= m + 15  ->  csum[m+16] - csum[m+1]
    return csum[:, m + DEMAND_WINDOW + 1] - csum[:, m + 1]


def reference_config(seed: int = 7, n_days: int = 27, **overrides) -> GeneratorConfig:
    """The tiny desk-scale scenario: 10 stations with 2 spots, clustered peaky demand.

    27 days split 20 train / 2 validation / 5 test by ``reference_split``.
    """
    kw = dict(n_stations=10, n_days=n_days, capacity_range=(2, 2), seed=seed)
    kw.update(overrides)
    return GeneratorConfig(**kw)


def reference_split(n_days: int = 27):
    """(train, validation, test) day indices; the last five days are the test set."""
    test = list(range(n_days - 5, n_days))
    val = list(range(n_days - 7, n_days - 5))
    return list(range(n_days - 7)), val, test
