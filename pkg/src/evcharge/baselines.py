"""Reference recommendation policies: Random, Greedy-N, Greedy-P-k, Real and IDDPG."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .domain import ChargingRequest, StationSpec, TrainConfig, eta, price_at

BASELINES = ("random", "greedy-n", "greedy-p", "real")


def recommend_random(candidates: Sequence[int], rng) -> int:
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    return int(candidates[int(rng.integers(len(candidates)))])


def _ranked(request: ChargingRequest, stations: Sequence[StationSpec], speed: float):
    """(eta, id, station) sorted by ETA then id."""
    return sorted(((eta(request.location, s.location, speed), s.id, s) for s in stations),
                  key=lambda t: (t[0], t[1]))


def recommend_nearest(request: ChargingRequest, stations: Sequence[StationSpec],
                      speed: float = 30.0) -> int:
    if not stations:
        raise ValueError("no stations")
    return _ranked(request, stations, speed)[0][1]


def recommend_cheapest_k(request: ChargingRequest, stations: Sequence[StationSpec], k: int,
                         speed: float = 30.0, minute: Optional[int] = None) -> int:
    """Cheapest of the ``k`` nearest, priced at the estimated arrival minute."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not stations:
        raise ValueError("no stations")
    t = request.arrival_minute if minute is None else minute
    near = _ranked(request, stations, speed)[:k]
    return min(near, key=lambda e: (price_at(e[2], t + e[0]), e[0], e[1]))[1]


class RandomPolicy:
    name = "random"

    def __init__(self, seed: int = 0, k: Optional[int] = None):
        self.rng = np.random.default_rng(seed)
        self.k = k

    def recommend(self, request, sim):
        return recommend_random(sim.active_set(request, self.k or sim.n), self.rng)


class GreedyNearest:
    name = "greedy-n"

    def __init__(self, k: Optional[int] = None):
        self.k = k

    def recommend(self, request, sim):
        ids = sim.active_set(request, self.k or sim.n)
        return recommend_nearest(request, [sim.stations[i].spec for i in ids], sim.scenario.speed)


class GreedyPrice:
    name = "greedy-p"

    def __init__(self, k: int = 5, active_k: Optional[int] = None):
        self.k = k
        self.active_k = active_k

    def recommend(self, request, sim):
        ids = sim.active_set(request, self.active_k or sim.n)
        return recommend_cheapest_k(request, [sim.stations[i].spec for i in ids], self.k,
                                    sim.scenario.speed, sim.minute)


class RealPolicy:
    """Synthetic stand-in for logged behaviour: always the ground-truth (nearest) station."""

    name = "real"

    def recommend(self, request, sim):
        return request.ground_truth_station


def make_baseline(name: str, seed: int = 0, k: Optional[int] = None, price_k: int = 5):
    if name == "random":
        return RandomPolicy(seed, k)
    if name == "greedy-n":
        return GreedyNearest(k)
    if name == "greedy-p":
        return GreedyPrice(price_k, k)
    if name == "real":
        return RealPolicy()
    raise ValueError(f"unknown policy {name!r}; valid: {', '.join(BASELINES + ('master', 'iddpg'))}")


def iddpg_train(scenario, cfg: TrainConfig, train_days, val_days=(), **kw):
    """Independent DDPG: per-agent critics over (o, a, p) and the averaged reward."""
    from .master.trainer import train

    return train(scenario, cfg, "avg", train_days, val_days, critic_kind="independent", **kw)
