"""Independent audits of a finished episode, shared by unit and acceptance tests."""

from collections import defaultdict

import numpy as np

from evcharge.baselines import RandomPolicy
from evcharge.domain import TrainConfig
from evcharge.scenario import GeneratorConfig, generate
from evcharge.simulator import Simulation


def random_episode(seed, cfg=None, policy=None):
    """A seeded random day with at most 20 stations and at most 300 requests."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 21))
    lo = int(rng.integers(1, 4))
    gen = GeneratorConfig(n_stations=n, n_days=1, capacity_range=(lo, lo + int(rng.integers(0, 3))),
                          city_extent=float(rng.uniform(3, 20)),
                          mean_rate=float(rng.uniform(0.02, 0.2)), seed=int(rng.integers(2**31)))
    sc = generate(gen)
    day = list(sc.episodes[0])
    if len(day) > 300:
        keep = sorted(rng.choice(len(day), size=300, replace=False))
        day = [day[i] for i in keep]
        sc = type(sc)(sc.stations, (tuple(day),), sc.grid_cell_km, sc.speed)
    cfg = cfg or TrainConfig(accept_prob=float(rng.choice([1.0, 0.7])))
    sim = Simulation(sc, 0, cfg, rng_seed=int(rng.integers(2**31)))
    res = sim.run(policy or RandomPolicy(int(rng.integers(2**31))))
    return sc, cfg, sim, res


def audit(sc, cfg, res):
    """Returns a list of violation strings (empty when the episode is sound)."""
    bad = []
    caps = np.array([s.capacity for s in sc.stations])[:, None]
    queued = caps - res.charging - res.available
    if np.any(res.charging > caps) or np.any(res.charging < 0):
        bad.append("charging outside [0, capacity]")
    if np.any(queued < 0):
        bad.append("negative queue")
    if np.any((queued > 0) & (res.charging < caps)):
        bad.append("EV queuing next to a free spot")

    settle = defaultdict(list)
    rec = {}
    arrive = {}
    for ev in res.log:
        if ev.kind in ("start", "fail"):
            settle[ev.request_id].append(ev)
        elif ev.kind == "recommend":
            rec[ev.request_id] = ev
        elif ev.kind == "arrive":
            arrive[ev.request_id] = ev
    req_ids = {r.id for r in sc.episodes[0]}
    if set(settle) != req_ids or any(len(v) != 1 for v in settle.values()):
        bad.append("settlement not exactly once")
    n_acc = sum(1 for e in rec.values() if e.detail["accepted"])
    if sum(1 for o in res.outcomes if o.accepted) != n_acc or len(res.outcomes) != len(req_ids):
        bad.append("outcome count mismatch")
    if len({o.request_id for o in res.outcomes}) != len(res.outcomes):
        bad.append("duplicate outcome")

    for rid, evs in settle.items():
        ev = evs[0]
        cwt = ev.detail["cwt"]
        if ev.kind == "fail" and cwt != cfg.fail_threshold + 1:
            bad.append(f"request {rid} failed with cwt {cwt}")
        if ev.kind == "start" and cwt > cfg.fail_threshold:
            bad.append(f"request {rid} charged after cwt {cwt}")
        if ev.detail["accepted"]:
            want = (cfg.eps_cwt, cfg.eps_cp) if ev.kind == "fail" else (-float(cwt), -ev.detail["cp"])
            if (ev.detail["r_cwt"], ev.detail["r_cp"]) != want:
                bad.append(f"request {rid} rewards {ev.detail['r_cwt'], ev.detail['r_cp']} != {want}")
        elif "r_cwt" in ev.detail:
            bad.append(f"rejected request {rid} carries a reward")

    # FIFO: nobody starts while an earlier arrival at the same station is still waiting
    for rid, evs in settle.items():
        ev = evs[0]
        if ev.kind != "start" or rid not in arrive:
            continue
        for other, a in arrive.items():
            if other == rid or a.station_id != ev.station_id or a.seq > arrive[rid].seq:
                continue
            s = settle[other][0]
            if s.seq > ev.seq and s.minute >= a.minute:
                bad.append(f"request {rid} overtook {other} at station {ev.station_id}")
    return bad


def collect_episode(sc, day, cfg, actor, seed=0, noise=0.1):
    """Run one exploratory episode with a collector attached, ingesting every minute.

    Returns the simulation and a list of (transition, minute it was pushed).
    """
    from evcharge.master.executor import MasterPolicy
    from evcharge.master.replay import TransitionCollector

    collector = TransitionCollector(cfg.gamma, cfg.d)
    policy = MasterPolicy(actor, cfg.k, noise, np.random.default_rng(seed), collector)
    pushed = []
    sim = Simulation(sc, day, cfg, rng_seed=seed)

    def observer(s, minute):
        collector.observe(s, minute)
        collector.ingest_when_available(s, minute, lambda tr: pushed.append((tr, minute)))

    sim.run(policy, observer)
    collector.flush(sim, lambda tr: pushed.append((tr, sim.minute)))
    return sim, pushed
