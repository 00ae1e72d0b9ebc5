"""Decentralized execution: every active station bids with the shared actor."""

from __future__ import annotations

import numpy as np

from ..domain import normalize
from .model import act, select_station
from .replay import StepRecord


def observation_matrix(sim, request, ids) -> np.ndarray:
    return np.stack([normalize(sim.observe(i, request), sim.stations[i].spec.capacity, sim.scales)
                     for i in ids])


class MasterPolicy:
    """Recommends the active station with the highest bid.

    With ``noise > 0`` Gaussian exploration noise is added to each bid;
    with a ``collector`` attached every decision is recorded for training.
    """

    def __init__(self, actor, k: int, noise: float = 0.0, rng=None, collector=None):
        self.actor = actor
        self.k = k
        self.noise = noise
        self.rng = rng
        self.collector = collector

    def recommend(self, request, sim):
        ids = sim.active_set(request, self.k)
        obs = observation_matrix(sim, request, ids)
        bids = act(self.actor, obs, self.noise, self.rng)
        etas = sim.etas(request)[ids]
        if self.collector is not None:
            self.collector.record(StepRecord(request.id, sim.minute, np.array(ids), obs, np.array(bids)))
        return select_station(ids, bids, etas)

    def bids(self, request, sim):
        """Noise-free bids of the active set, for inspection."""
        ids = sim.active_set(request, self.k)
        return ids, act(self.actor, observation_matrix(sim, request, ids))
