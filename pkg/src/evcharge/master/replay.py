"""Delayed transitions, the FIFO replay buffer and the delayed-access collector."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..domain import discounted_return


@dataclass
class StepRecord:
    """What the actors saw and did for one request."""

    request_id: int
    minute: int
    active: np.ndarray  # station ids (K,)
    obs: np.ndarray  # (K, OBS_DIM) normalized
    actions: np.ndarray  # (K,) bids actually played
    # filled by the collector
    finish: Optional[int] = None
    ret_cwt: float = 0.0
    ret_cp: float = 0.0
    successor: Optional["StepRecord"] = None
    next_self_obs: Optional[np.ndarray] = None


@dataclass(frozen=True)
class DelayedTransition:
    request_id: int
    t_minute: int
    next_minute: int
    active: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    traces: np.ndarray  # (K, d) raw signed availability
    next_request_id: int
    next_active: np.ndarray
    next_obs: np.ndarray
    next_traces: np.ndarray
    ret_cwt: float
    ret_cp: float
    assembled_at: int
    next_self_obs: Optional[np.ndarray] = None
    next_self_traces: Optional[np.ndarray] = None
    trace_scale: Optional[np.ndarray] = None  # per-agent capacity, (K,)
    next_trace_scale: Optional[np.ndarray] = None

    @property
    def dt(self) -> int:
        return self.next_minute - self.t_minute

    @property
    def trace_horizon(self) -> int:
        """Last simulated minute any stored trace depends on."""
        return max(self.t_minute, self.next_minute) + self.traces.shape[1]


class ReplayBuffer:
    """Fixed-capacity ring with strict FIFO eviction and array-stacked sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: deque = deque(maxlen=capacity)
        self.pushed = 0
        self._arrays: Optional[Dict[str, np.ndarray]] = None
        self._slots: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def _fields(self, tr: DelayedTransition, use_trace: bool) -> Dict[str, np.ndarray]:
        tr_cap = tr.trace_scale[:, None]
        ntr_cap = tr.next_trace_scale[:, None]
        out = {
            "obs": tr.obs, "actions": tr.actions,
            "traces": tr.traces / tr_cap if use_trace else np.zeros_like(tr.traces, dtype=float),
            "next_obs": tr.next_obs,
            "next_traces": tr.next_traces / ntr_cap if use_trace else np.zeros_like(tr.next_traces, dtype=float),
            "ret_cwt": np.float64(tr.ret_cwt), "ret_cp": np.float64(tr.ret_cp),
            "dt": np.float64(tr.dt),
        }
        if tr.next_self_obs is not None:
            out["next_self_obs"] = tr.next_self_obs
            out["next_self_traces"] = (tr.next_self_traces / tr_cap if use_trace
                                       else np.zeros_like(tr.next_self_traces, dtype=float))
        return out

    def push(self, tr: DelayedTransition, use_trace: bool = True) -> None:
        fields = self._fields(tr, use_trace)
        if self._arrays is None:
            self._arrays = {k: np.zeros((self.capacity,) + np.shape(v)) for k, v in fields.items()}
        slot = self.pushed % self.capacity
        for k, v in fields.items():
            self._arrays[k][slot] = v
        self.items.append(tr)
        self._slots.append(slot)
        self.pushed += 1

    def sample(self, batch_size: int, rng) -> Dict[str, np.ndarray]:
        n = len(self.items)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        pick = rng.choice(n, size=min(batch_size, n), replace=False)
        slots = np.asarray(self._slots)[pick]
        return {k: v[slots] for k, v in self._arrays.items()}

    def batch_of(self, transitions, use_trace: bool = True) -> Dict[str, np.ndarray]:
        rows = [self._fields(t, use_trace) for t in transitions]
        return {k: np.stack([r[k] for r in rows]) for k in rows[0]}


def stack_transitions(transitions, use_trace: bool = True) -> Dict[str, np.ndarray]:
    return ReplayBuffer(1).batch_of(transitions, use_trace)


class TransitionCollector:
    """Turns a running simulation into delayed transitions.

    Returns are accumulated incrementally as settlements appear in the
    event log; a step's window closes when its successor request (the first
    request after the step's own finish time) arrives.  A closed step is
    released only once the simulation has advanced ``d`` minutes past the
    successor so that both competition traces are fully observed.
    """

    def __init__(self, gamma: float, d: int, self_obs: bool = False):
        self.gamma = gamma
        self.d = d
        self.self_obs = self_obs
        self.records: Dict[int, StepRecord] = {}
        self._open: List[StepRecord] = []  # window still accumulating
        self._closed: deque = deque()  # waiting for the trace horizon
        self._log_pos = 0
        self.released: List[DelayedTransition] = []

    def record(self, rec: StepRecord) -> None:
        self.records[rec.request_id] = rec
        self._open.append(rec)

    def observe(self, sim, minute: int) -> None:
        """Phase-3 bookkeeping: settlements, successor matching."""
        log = sim.log
        new = []
        while self._log_pos < len(log):
            ev = log[self._log_pos]
            self._log_pos += 1
            if ev.kind in ("start", "fail"):
                rec = self.records.get(ev.request_id)
                if rec is not None:
                    rec.finish = ev.minute
                if ev.detail.get("accepted"):
                    new.append((ev.minute, ev.detail["r_cwt"], ev.detail["r_cp"]))
        if new:
            for rec in self._open:
                for f, r_cwt, r_cp in new:
                    if f > rec.minute:
                        w = self.gamma ** (f - rec.minute - 1)
                        rec.ret_cwt += w * r_cwt
                        rec.ret_cp += w * r_cp
        arrivals = [self.records[r.id] for r in sim.requests_at(minute) if r.id in self.records]
        if arrivals:
            head = arrivals[0]
            still = []
            for rec in self._open:
                if rec.finish is not None and rec.finish < minute:
                    rec.successor = head
                    if self.self_obs:
                        rec.next_self_obs = self._self_obs(sim, rec, head)
                    self._closed.append(rec)
                else:
                    still.append(rec)
            self._open = still

    def _self_obs(self, sim, rec: StepRecord, succ: StepRecord) -> np.ndarray:
        from ..domain import normalize

        pos = {int(s): j for j, s in enumerate(succ.active)}
        req = next(r for r in sim.requests_at(succ.minute) if r.id == succ.request_id)
        rows = []
        for s in rec.active:
            s = int(s)
            if s in pos:
                rows.append(succ.obs[pos[s]])
            else:
                rows.append(normalize(sim.observe(s, req), sim.stations[s].spec.capacity, sim.scales))
        return np.array(rows)

    def ingest_when_available(self, sim, now_minute: int, sink) -> int:
        """Assemble every closed step whose traces are observable at ``now_minute``."""
        count = 0
        while self._closed and now_minute >= self._closed[0].successor.minute + self.d:
            rec = self._closed.popleft()
            tr = self.assemble(sim, rec, now_minute)
            self.released.append(tr)
            sink(tr)
            count += 1
        return count

    def assemble(self, sim, rec: StepRecord, now_minute: int) -> DelayedTransition:
        succ = rec.successor
        caps = np.array([sim.stations[int(s)].spec.capacity for s in rec.active], dtype=float)
        ncaps = np.array([sim.stations[int(s)].spec.capacity for s in succ.active], dtype=float)
        traces = np.stack([sim.trace_array(int(s), rec.minute, self.d, rec.request_id) for s in rec.active])
        ntraces = np.stack([sim.trace_array(int(s), succ.minute, self.d, succ.request_id) for s in succ.active])
        self_tr = None
        if self.self_obs:
            self_tr = np.stack([sim.trace_array(int(s), succ.minute, self.d, succ.request_id)
                                for s in rec.active])
        return DelayedTransition(
            request_id=rec.request_id, t_minute=rec.minute, next_minute=succ.minute,
            active=rec.active, obs=rec.obs, actions=rec.actions, traces=traces,
            next_request_id=succ.request_id, next_active=succ.active, next_obs=succ.obs,
            next_traces=ntraces, ret_cwt=rec.ret_cwt, ret_cp=rec.ret_cp, assembled_at=now_minute,
            next_self_obs=rec.next_self_obs, next_self_traces=self_tr,
            trace_scale=caps, next_trace_scale=ncaps)

    def flush(self, sim, sink) -> int:
        """End of episode: release whatever is observable; drop steps with no successor."""
        n = self.ingest_when_available(sim, sim.minute, sink)
        self._open = []
        return n


def ingest_when_available(buffer: ReplayBuffer, collector: TransitionCollector, sim, now_minute: int,
                          use_trace: bool = True) -> int:
    return collector.ingest_when_available(sim, now_minute, lambda tr: buffer.push(tr, use_trace))


def oracle_return(log, t_minute: int, next_minute: int, gamma: float):
    """Independent recomputation of a transition's (R_cwt, R_cp) from the event log."""
    from ..simulator import settlements_between

    s = settlements_between(log, t_minute, next_minute)
    return (discounted_return([(f, a) for f, a, _ in s], t_minute, gamma),
            discounted_return([(f, b) for f, _, b in s], t_minute, gamma))
