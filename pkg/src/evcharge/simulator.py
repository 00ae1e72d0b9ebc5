"""Minute-stepped simulation of one charging day.

Every minute is processed in three phases:

1. station events: threshold failures, departures, EV arrivals at stations
   and FIFO charge starts;
2. recommendations for the requests raised this minute;
3. an observer hook, used by the trainer to collect delayed transitions.

After the last request minute the clock keeps running, without new
requests, until every pending EV has either started charging or failed, and
until the availability history covers ``d`` minutes past the last request.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain import (
    MINUTES_PER_DAY,
    ChargeOutcome,
    ChargingRequest,
    CompetitionTrace,
    FeatureScales,
    Observation,
    StationSpec,
    TrainConfig,
    eta,
    price_at,
    reward_pair,
)
from .scenario import Scenario, demand_table


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Event:
    minute: int
    seq: int
    kind: str
    request_id: int
    station_id: Optional[int]
    detail: dict

    def to_json(self) -> str:
        return json.dumps({"minute": self.minute, "seq": self.seq, "kind": self.kind,
                           "request_id": self.request_id, "station_id": self.station_id,
                           "detail": self.detail}, sort_keys=False)


class EventLog:
    """Append-only, totally ordered by (minute, seq)."""

    # "start" and "fail" are the two settlement kinds
    KINDS = ("request", "recommend", "arrive", "start", "fail", "depart")

    def __init__(self):
        self._events: List[Event] = []

    def append(self, minute, kind, request_id, station_id, **detail) -> Event:
        if self._events and minute < self._events[-1].minute:
            raise SimulationError("event log must be appended in time order")
        ev = Event(minute, len(self._events), kind, request_id, station_id, detail)
        self._events.append(ev)
        return ev

    def __iter__(self):
        return iter(self._events)

    def __len__(self):
        return len(self._events)

    def __getitem__(self, i):
        return self._events[i]

    def of_kind(self, *kinds):
        return [e for e in self._events if e.kind in kinds]

    def dump_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self._events:
                fh.write(ev.to_json() + "\n")


def charge_duration(power: float, energy: float, rng=None) -> int:
    """Charging time in minutes, Normal(mu, 0.1 mu) with mu = energy / power * 60.

    ``rng=None`` is the zero-variance mode and returns round(mu).
    """
    z = 0.0 if rng is None else float(rng.standard_normal())
    return duration_from_normal(power, energy, z)


def duration_from_normal(power: float, energy: float, z: float) -> int:
    mu = energy / power * 60.0
    return max(1, int(round(mu + 0.1 * mu * z)))


class StationState:
    """Live occupancy of one station; ``available`` goes negative when EVs queue."""

    def __init__(self, spec: StationSpec):
        self.spec = spec
        self.charging = 0
        self.queue: deque = deque()  # (request_id, request_minute)
        self.departures: Dict[int, int] = {}

    @property
    def available(self) -> int:
        return self.spec.capacity - self.charging - len(self.queue)

    @property
    def present(self) -> int:
        return self.charging + len(self.queue)

    def free(self, minute: int) -> int:
        n = self.departures.pop(minute, 0)
        self.charging -= n
        return n

    def start(self, minute: int, duration: int) -> None:
        if self.charging >= self.spec.capacity:
            raise SimulationError(f"station {self.spec.id} over capacity")
        self.charging += 1
        end = minute + duration
        self.departures[end] = self.departures.get(end, 0) + 1


def settle_arrival(state: StationState, request: ChargingRequest, minute: int,
                   duration: int) -> Optional[int]:
    """Put an arriving EV on a free spot or at the back of the FIFO queue.

    Returns the charge-start CWT when charging begins immediately, otherwise
    None; the EV then waits at the back of the queue.
    """
    if state.available > 0:
        state.start(minute, duration)
        return minute - request.arrival_minute
    state.queue.append((request.id, request.arrival_minute))
    return None


@dataclass
class _Pending:
    request: ChargingRequest
    station: int
    recommended: Optional[int]
    accepted: bool
    eta: int
    reference_cp: float
    status: str = "driving"  # driving | queued | charging | failed


@dataclass
class EpisodeResult:
    outcomes: List[ChargeOutcome]
    log: EventLog
    available: np.ndarray  # (N, horizon) signed availability after phase 1/2 of each minute
    charging: np.ndarray  # (N, horizon) EVs on spots
    horizon: int


class Simulation:
    """Single-day simulation; owns all mutable state and is single-threaded."""

    def __init__(self, scenario: Scenario, day: int, cfg: TrainConfig, rng_seed: int = 0):
        if not 0 <= day < scenario.n_days:
            raise SimulationError(f"day {day} out of range (0..{scenario.n_days - 1})")
        self.scenario = scenario
        self.day = day
        self.cfg = cfg
        self.requests: Tuple[ChargingRequest, ...] = scenario.episodes[day]
        self.stations = [StationState(s) for s in scenario.stations]
        self.n = len(self.stations)
        self.horizon = MINUTES_PER_DAY + max(cfg.d, cfg.fail_threshold + 1) + 1
        self.log = EventLog()
        self.outcomes: List[ChargeOutcome] = []
        self.minute = -1
        self._phase_done = -1  # last minute whose phase 1 has finished

        rng = np.random.default_rng(rng_seed)
        n_req = len(self.requests)
        # drawn up front so every policy faces the same charging times and acceptances
        self._z = dict(zip((r.id for r in self.requests), rng.standard_normal(n_req)))
        self._u = dict(zip((r.id for r in self.requests), rng.uniform(size=n_req)))

        self._by_minute: Dict[int, List[ChargingRequest]] = {}
        for r in self.requests:
            self._by_minute.setdefault(r.arrival_minute, []).append(r)
        self._arrivals: Dict[int, List[int]] = {}
        self._deadlines: Dict[int, List[int]] = {}
        self._pending: Dict[int, _Pending] = {}
        self._finish: Dict[int, int] = {}
        self._presence: Dict[int, Tuple[int, int, Optional[int]]] = {}
        self._eta_cache: Dict[int, np.ndarray] = {}
        self._departing: Dict[int, set] = {}  # minute -> stations with a departure
        self._dirty: set = set(range(self.n))

        self._available = np.zeros((self.n, self.horizon), dtype=np.int64)
        self._charging = np.zeros((self.n, self.horizon), dtype=np.int64)
        self._demand = demand_table(scenario, day)
        self.scales = FeatureScales(
            n_stations=self.n,
            max_power=max(s.power for s in scenario.stations),
            max_price=max(p for s in scenario.stations for _, _, p in s.price_schedule),
            demand_cap=cfg.demand_cap,
            fail_threshold=cfg.fail_threshold,
        )

    # ---- queries used by policies -----------------------------------------

    def etas(self, request: ChargingRequest) -> np.ndarray:
        got = self._eta_cache.get(request.id)
        if got is None:
            got = np.array([eta(request.location, s.spec.location, self.scenario.speed)
                            for s in self.stations], dtype=np.int64)
            self._eta_cache[request.id] = got
        return got

    def observe(self, station: int, request: ChargingRequest) -> Observation:
        st = self.stations[station]
        e = int(self.etas(request)[station])
        m = self.minute
        return Observation(
            station_index=station,
            time=m,
            supply=st.available,
            future_demand=int(self._demand[station, min(m, MINUTES_PER_DAY - 1)]),
            power=st.spec.power,
            eta=e,
            cp_at_eta=price_at(st.spec, m + e),
        )

    def active_set(self, request: ChargingRequest, k: int) -> List[int]:
        etas = self.etas(request)
        order = sorted(range(self.n), key=lambda i: (etas[i], i))
        return order[:min(k, self.n)]

    def requests_at(self, minute: int) -> List[ChargingRequest]:
        return self._by_minute.get(minute, [])

    def finish_minute(self, request_id: int) -> Optional[int]:
        return self._finish.get(request_id)

    def is_accepted(self, request_id: int) -> bool:
        p = self._pending.get(request_id)
        return bool(p and p.accepted)

    def competition_trace(self, station: int, t_minute: int, d: int,
                          focal_request: Optional[int] = None) -> CompetitionTrace:
        return CompetitionTrace(tuple(int(v) for v in self.trace_array(station, t_minute, d, focal_request)))

    def trace_array(self, station: int, t_minute: int, d: int,
                    focal_request: Optional[int] = None) -> np.ndarray:
        """Signed availability at minutes t+1..t+d with the focal EV's stay removed."""
        if t_minute + d > self._phase_done:
            raise SimulationError(
                f"trace for t={t_minute}, d={d} needs minute {t_minute + d}; "
                f"simulation has only reached {self._phase_done}")
        vals = self._available[station, t_minute + 1:t_minute + d + 1].astype(float)
        if focal_request is not None and focal_request in self._presence:
            st, start, end = self._presence[focal_request]
            if st == station:
                lo = max(start, t_minute + 1)
                hi = t_minute + d + 1 if end is None else min(end, t_minute + d + 1)
                if hi > lo:
                    vals[lo - t_minute - 1:hi - t_minute - 1] += 1
        return vals

    # ---- stepping ---------------------------------------------------------

    def run(self, policy, observer: Optional[Callable] = None) -> EpisodeResult:
        begin = getattr(policy, "begin_episode", None)
        if begin is not None:
            begin(self)
        for minute in range(self.horizon):
            self.step(minute, policy, observer)
        if self._pending_unsettled():
            raise SimulationError("episode ended with unsettled requests")
        return self.result()

    def result(self) -> EpisodeResult:
        return EpisodeResult(list(self.outcomes), self.log, self._available.copy(),
                             self._charging.copy(), self.horizon)

    def _pending_unsettled(self):
        return [rid for rid, p in self._pending.items() if p.status in ("driving", "queued")]

    def step(self, minute: int, policy, observer=None) -> None:
        if minute != self.minute + 1:
            raise SimulationError("minutes must be stepped in order")
        self.minute = minute
        self._station_events(minute)
        self._snapshot(minute)
        self._phase_done = minute
        for req in self._by_minute.get(minute, ()):
            self._recommend(req, minute, policy)
        if minute in self._by_minute:
            self._snapshot_changed(minute)
        if observer is not None:
            observer(self, minute)

    def _snapshot(self, minute):
        # untouched stations carry their previous column forward
        if minute > 0:
            self._available[:, minute] = self._available[:, minute - 1]
            self._charging[:, minute] = self._charging[:, minute - 1]
        for i in self._dirty:
            st = self.stations[i]
            self._available[i, minute] = st.available
            self._charging[i, minute] = st.charging
        self._dirty = set()

    def _snapshot_changed(self, minute):
        for i in self._dirty:
            st = self.stations[i]
            self._available[i, minute] = st.available
            self._charging[i, minute] = st.charging
        self._dirty = set()

    def _start(self, station: int, minute: int, duration: int) -> None:
        self.stations[station].start(minute, duration)
        self._departing.setdefault(minute + duration, set()).add(station)

    def _station_events(self, minute: int) -> None:
        touched = set()
        for rid in self._deadlines.pop(minute, ()):
            p = self._pending[rid]
            if p.status not in ("driving", "queued"):
                continue
            if p.status == "queued":
                st = self.stations[p.station]
                st.queue = deque(q for q in st.queue if q[0] != rid)
                self._close_presence(rid, minute)
                touched.add(p.station)
            self._settle(p, minute, success=False)
        for i in sorted(self._departing.pop(minute, ())):
            n = self.stations[i].free(minute)
            if n:
                touched.add(i)
                self.log.append(minute, "depart", -1, i, count=n)
        self._dirty |= touched
        for i in sorted(touched):
            self._promote(i, minute)
        for rid in self._arrivals.pop(minute, ()):
            p = self._pending[rid]
            if p.status == "driving":
                self._arrive(p, minute)

    def _arrive(self, p: _Pending, minute: int) -> None:
        st = self.stations[p.station]
        rid = p.request.id
        self._dirty.add(p.station)
        self.log.append(minute, "arrive", rid, p.station)
        dur = duration_from_normal(st.spec.power, p.request.energy, self._z[rid])
        if settle_arrival(st, p.request, minute, dur) is None:
            self._presence[rid] = (p.station, minute, None)
            p.status = "queued"
        else:
            self._departing.setdefault(minute + dur, set()).add(p.station)
            self._presence[rid] = (p.station, minute, minute + dur)
            p.status = "charging"
            self._settle(p, minute, success=True, duration=dur)

    def _promote(self, station: int, minute: int) -> None:
        st = self.stations[station]
        while st.queue and st.charging < st.spec.capacity:
            rid, _ = st.queue.popleft()
            p = self._pending[rid]
            dur = duration_from_normal(st.spec.power, p.request.energy, self._z[rid])
            self._start(station, minute, dur)
            self._presence[rid] = (station, self._presence[rid][1], minute + dur)
            p.status = "charging"
            self._settle(p, minute, success=True, duration=dur)

    def _close_presence(self, rid, minute):
        st, start, _ = self._presence[rid]
        self._presence[rid] = (st, start, minute)

    def _settle(self, p: _Pending, minute: int, success: bool, duration: int = 0) -> None:
        req = p.request
        cwt = minute - req.arrival_minute
        spec = self.stations[p.station].spec
        cp = price_at(spec, req.arrival_minute + p.eta) if not success else price_at(spec, minute)
        if not success:
            p.status = "failed"
        out = ChargeOutcome(
            request_id=req.id, recommended_station=p.recommended, station=p.station,
            accepted=p.accepted, success=success, cwt=cwt, cp=cp, energy=req.energy,
            arrival_minute=req.arrival_minute, finish_minute=minute, reference_cp=p.reference_cp)
        self.outcomes.append(out)
        self._finish[req.id] = minute
        detail = {"accepted": p.accepted, "cwt": cwt, "cp": cp}
        if success:
            detail["duration"] = duration
        if p.accepted:
            r_cwt, r_cp = reward_pair(out, self.cfg)
            detail.update(r_cwt=r_cwt, r_cp=r_cp)
        self.log.append(minute, "start" if success else "fail", req.id, p.station, **detail)

    def _recommend(self, req: ChargingRequest, minute: int, policy) -> None:
        self.log.append(minute, "request", req.id, None)
        choice = policy.recommend(req, self)
        if choice is not None:
            if not isinstance(choice, (int, np.integer)) or not 0 <= int(choice) < self.n:
                raise SimulationError(f"policy returned invalid station id {choice!r}")
            choice = int(choice)
        gt = req.ground_truth_station
        accepted = bool(choice is not None and self._u[req.id] < self.cfg.accept_prob)
        station = choice if accepted else gt
        etas = self.etas(req)
        e = int(etas[station])
        ref_cp = price_at(self.scenario.stations[gt], minute + int(etas[gt]))
        p = _Pending(req, station, choice, accepted, e, ref_cp)
        self._pending[req.id] = p
        self.log.append(minute, "recommend", req.id, station, recommended=choice,
                        accepted=accepted, eta=e)
        self._deadlines.setdefault(minute + self.cfg.fail_threshold + 1, []).append(req.id)
        if e == 0:
            self._arrive(p, minute)
        else:
            self._arrivals.setdefault(minute + e, []).append(req.id)


def run_episode(scenario: Scenario, day: int, policy, cfg: TrainConfig, rng_seed: int = 0,
                observer=None) -> EpisodeResult:
    """Simulate one day under ``policy`` (``recommend(request, sim) -> id | None``)."""
    return Simulation(scenario, day, cfg, rng_seed).run(policy, observer)


def competition_trace(sim: Simulation, station: int, t_minute: int, d: int,
                      focal_request: Optional[int] = None) -> CompetitionTrace:
    return sim.competition_trace(station, t_minute, d, focal_request)


def settlements_between(log: EventLog, t_minute: int, t_next_minute: int):
    """(finish_minute, r_cwt, r_cp) of accepted requests finishing in (t, t_next]."""
    if t_next_minute <= t_minute:
        raise ValueError("t_next_minute must be after t_minute")
    out = []
    for ev in log:
        if ev.minute <= t_minute:
            continue
        if ev.minute > t_next_minute:
            break
        if ev.kind in ("start", "fail") and ev.detail.get("accepted"):
            out.append((ev.minute, ev.detail["r_cwt"], ev.detail["r_cp"]))
    return out


def episode_seed(seed: int, day: int) -> list:
    """Simulation seed for a (run seed, day) pair; identical across policies."""
    return [int(seed), int(day)]


def run_days(scenario: Scenario, days, policy, cfg: TrainConfig, seed: int = 0):
    """Outcome lists for each day in ``days``; each day uses :func:`episode_seed`."""
    return [run_episode(scenario, d, policy, cfg, episode_seed(seed, d)).outcomes for d in days]
