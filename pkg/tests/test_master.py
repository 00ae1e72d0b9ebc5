import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evcharge.domain import OBS_DIM, TrainConfig
from evcharge.master import (
    MasterModel,
    ReplayBuffer,
    TrainingError,
    act,
    actor_update,
    critic_update,
    encode_trace,
    gap_ratio,
    oracle_return,
    reweight,
    select_station,
    train,
)
from evcharge.master.model import (
    action_gradients,
    critic_eval,
    critic_targets,
    gap_ratios,
    policy_gradient,
)
from evcharge.master.replay import stack_transitions
from evcharge.baselines import recommend_nearest
from evcharge.nn import mlp_forward
from evcharge.scenario import GeneratorConfig, generate
from evcharge.simulator import Simulation

from conftest import Fixed, request, scenario, station
from gradcheck import SMALL, actor_chain_case, critic_case, sum_critic_case
from helpers import collect_episode


def test_select_station_examples():
    assert select_station([4, 7, 9], [0.2, 0.9, 0.5], [1, 1, 1]) == 7
    assert select_station([3], [-0.4], [12]) == 3
    assert select_station([0, 1], [0.5, 0.5], [10, 7]) == 1
    assert select_station([5, 2], [0.5, 0.5], [7, 7]) == 2
    with pytest.raises(ValueError):
        select_station([], [], [])


@given(st.lists(st.tuples(st.integers(-100, 100), st.integers(0, 60)), min_size=1, max_size=8), st.randoms())
def test_select_station_permutation_and_squash_invariance(rows, rnd):
    ids = list(range(len(rows)))
    bids = [b / 100 for b, _ in rows]
    etas = [e for _, e in rows]
    choice = select_station(ids, bids, etas)
    order = ids[:]
    rnd.shuffle(order)
    assert select_station(order, [bids[i] for i in order], [etas[i] for i in order]) == choice
    assert select_station(ids, [math.atan(5 * b) + 3 for b in bids], etas) == choice


def test_active_set(cfg):
    stations = [station(0, 3.0), station(1, 1.0), station(2, 2.0)]
    sc = scenario(stations, [request(0, 0, 0.0)])
    sim = Simulation(sc, 0, cfg)
    req = sc.episodes[0][0]
    assert sim.active_set(req, 2) == [1, 2]
    assert sorted(sim.active_set(req, 3)) == [0, 1, 2]
    assert sorted(sim.active_set(req, 50)) == [0, 1, 2]
    assert sim.active_set(req, 1) == [recommend_nearest(req, stations)]


def test_act_examples(rng):
    model = MasterModel(SMALL, rng)
    o = rng.uniform(-1, 1, size=OBS_DIM)
    assert act(model.actor, o) == act(model.actor, o)
    assert act(model.actor, o) == pytest.approx(mlp_forward(model.actor, o)[0][0], abs=0)
    for w in model.actor.weights + model.actor.biases:
        w[...] = 0
    assert act(model.actor, o) == 0.0
    noisy = act(model.actor, np.tile(o, (500, 1)), 5.0, rng)
    assert np.all(np.abs(noisy) <= 1.0)


def test_encode_trace_examples(rng):
    W = rng.normal(size=(4, 6))
    assert np.all(encode_trace(W, np.zeros(6)) == 0)
    assert np.all(encode_trace(-np.eye(6), np.arange(1.0, 7.0)) == 0)
    I = rng.normal(size=6)
    want = [max(0.0, sum(W[r, c] * I[c] for c in range(6))) for r in range(4)]
    assert np.allclose(encode_trace(W, I), want, atol=1e-12)
    with pytest.raises(ValueError):
        encode_trace(W, np.zeros(5))


def test_critic_is_permutation_invariant(rng):
    model = MasterModel(SMALL, rng)
    obs = rng.uniform(-1, 1, size=(5, OBS_DIM))
    a = rng.uniform(-1, 1, size=5)
    tr = rng.uniform(-1, 1, size=(5, SMALL.d))
    perm = rng.permutation(5)
    q = model.q("cwt", obs, a, tr)
    assert q == pytest.approx(model.q("cwt", obs[perm], a[perm], tr[perm]), abs=1e-13)
    with pytest.raises(ValueError):
        model.q("cwt", obs, a[:4], tr)
    head = model.critics["cwt"].head
    for w in head.weights + head.biases:
        w[...] = 0
    assert model.q("cwt", obs, a, tr) == 0.0


def test_backward_passes_match_finite_differences():
    rng = np.random.default_rng(9)
    assert max(critic_case(rng) for _ in range(10)) < 1e-4
    assert max(critic_case(rng, "independent") for _ in range(10)) < 1e-4
    assert max(actor_chain_case(rng) for _ in range(10)) < 1e-4
    assert max(actor_chain_case(rng, preact_reg=0.05) for _ in range(10)) < 1e-4


def test_sum_critic_gradient_is_sum_of_gradients():
    rng = np.random.default_rng(10)
    assert max(sum_critic_case(rng) for _ in range(20)) < 1e-10


def _batch(rng, cfg, B=1, K=3, dt=5.0, ret=(-10.0, -1.5)):
    return {"obs": rng.uniform(-1, 1, size=(B, K, OBS_DIM)), "actions": rng.uniform(-1, 1, size=(B, K)),
            "traces": rng.uniform(-1, 1, size=(B, K, cfg.d)),
            "next_obs": rng.uniform(-1, 1, size=(B, K, OBS_DIM)),
            "next_traces": rng.uniform(-1, 1, size=(B, K, cfg.d)),
            "ret_cwt": np.full(B, ret[0]), "ret_cp": np.full(B, ret[1]), "dt": np.full(B, dt)}


def test_critic_update_loss_matches_scalar_oracle(rng):
    model = MasterModel(SMALL, rng)
    b = _batch(rng, SMALL)
    s_cwt, s_cp = SMALL.reward_scales
    losses = {}
    for name, r in (("cwt", b["ret_cwt"][0] * s_cwt), ("cp", b["ret_cp"][0] * s_cp)):
        tgt = model.critic_targets[name]
        a_next = act(model.actor_target, b["next_obs"][0])
        y = r + SMALL.gamma ** 5 * critic_eval(tgt, model.W_p_target, b["next_obs"][0], a_next, b["next_traces"][0])
        q = critic_eval(model.critics[name], model.W_p, b["obs"][0], b["actions"][0], b["traces"][0])
        losses[name] = (q - y) ** 2
    got = critic_update(model, b)
    assert got["cwt"] == pytest.approx(losses["cwt"], rel=1e-12)
    assert got["cp"] == pytest.approx(losses["cp"], rel=1e-12)
    with pytest.raises(ValueError):
        critic_update(model, {k: v[:0] for k, v in b.items()})


def test_critic_update_fixed_point(rng):
    model = MasterModel(SMALL, rng, objectives=("cwt",))
    b = _batch(rng, SMALL)
    y_without_reward = critic_targets(model, dict(b, ret_cwt=np.zeros(1)))["cwt"]
    q = model.q("cwt", b["obs"], b["actions"], b["traces"])
    b["ret_cwt"] = (q - y_without_reward) / SMALL.reward_scales[0]
    before = {k: v.copy() for k, v in model.critic_arrays().items()}
    assert critic_update(model, b)["cwt"] == pytest.approx(0.0, abs=1e-20)
    for k, v in model.critic_arrays().items():
        assert np.allclose(v, before[k], atol=1e-15)


def test_long_gap_target_is_the_reward(rng):
    model = MasterModel(SMALL, rng)
    b = _batch(rng, SMALL, dt=1e5)
    y = critic_targets(model, b)
    assert y["cwt"][0] == pytest.approx(-10.0 / 60.0, abs=1e-12)
    assert y["cp"][0] == pytest.approx(-1.5 / 2.8, abs=1e-12)


def test_gap_ratio_examples():
    assert gap_ratio(-100.0, -100.0) == 0.0
    assert gap_ratio(-100.0, -150.0) == pytest.approx(0.5)
    assert gap_ratio(-100.0, -80.0) == pytest.approx(-0.2)
    assert gap_ratio(1e-9, -5.0) == 0.0


def test_reweight_examples():
    assert reweight(0.3, 0.3, 0.2) == 0.5
    assert reweight(0.5, 0.3, 0.2) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert round(reweight(0.5, 0.3, 0.2), 4) == 0.7311
    assert round(reweight(1.0, 0.0, 0.2), 4) == 0.9933
    assert 0 < reweight(1e4, -1e4, 0.2) <= 1 and np.isfinite(reweight(1e4, -1e4, 0.2))
    with pytest.raises(ValueError):
        reweight(0, 0, 0)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 5))
def test_reweight_is_the_logistic_of_the_gap_difference(a, b, sigma):
    z = (a - b) / sigma
    want = 1 / (1 + math.exp(-z)) if z > -700 else 0.0
    assert abs(reweight(a, b, sigma) - want) < 1e-12


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 1), st.floats(0.001, 1))
def test_reweight_monotone(a, b, sigma, step):
    assert reweight(a + step, b, sigma) >= reweight(a, b, sigma)


def test_gap_ratios_need_optima(rng):
    model = MasterModel(SMALL, rng)
    with pytest.raises(ValueError):
        gap_ratios(model, _batch(rng, SMALL))
    model.optimal = {"cwt": model.frozen("cwt"), "cp": model.frozen("cp")}
    g1, g2 = gap_ratios(model, _batch(rng, SMALL, B=4))
    assert np.allclose(g1, 0, atol=1e-12) and np.allclose(g2, 0, atol=1e-12)


def test_actor_weights_combine_linearly(rng):
    model = MasterModel(SMALL, rng)
    b = _batch(rng, SMALL, B=4)
    beta = 0.3
    mixed = action_gradients(model, b, {"cwt": beta, "cp": 1 - beta})
    cwt = action_gradients(model, b, {"cwt": 1.0})
    cp = action_gradients(model, b, {"cp": 1.0})
    assert np.allclose(mixed, beta * cwt + (1 - beta) * cp, atol=1e-14)
    assert np.array_equal(action_gradients(model, b, {"cwt": 1.0, "cp": 0.0}), cwt)


def test_actor_update_with_flat_critics_only_decays(rng):
    model = MasterModel(SMALL, rng)
    for c in model.critics.values():
        for w in c.head.weights + c.head.biases:
            w[...] = 0
    before = {k: v.copy() for k, v in model.actor.arrays().items()}
    cfg0 = model.cfg
    model.cfg = TrainConfig(**{**cfg0.to_dict(), "preact_reg": 0.0})
    assert actor_update(model, _batch(rng, SMALL), 0.5) == 0.0
    for k, v in model.actor.arrays().items():
        assert np.array_equal(v, before[k])


def test_identical_objectives_give_half_weight_and_average_direction(rng):
    cfg = TrainConfig(hidden=8, attention_dim=4, trace_dim=5, d=6, preact_reg=0.0)
    model = MasterModel(cfg, rng)
    model.critics["cp"] = model.critics["cwt"].copy()
    model.optimal = {"cwt": model.frozen("cwt"), "cp": model.frozen("cwt")}
    b = _batch(rng, cfg, B=6)
    g1, g2 = gap_ratios(model, b)
    assert np.all(reweight(g1, g2, cfg.sigma) == 0.5)
    multi = policy_gradient(model.actor, b["obs"], action_gradients(model, b, {"cwt": 0.5, "cp": 0.5}))
    single = policy_gradient(model.actor, b["obs"], action_gradients(model, b, {"cwt": 1.0}))
    for k in multi:
        assert np.allclose(multi[k], single[k], atol=1e-10)


# ---- delayed access ------------------------------------------------------

def test_overlapping_timeline_is_eligible_at_13_50():
    cfg = TrainConfig(accept_prob=1.0)
    # q_t at 13:00 with a 9 km (18 minute) drive finishes at 13:18; q_{t+j} at 13:20
    sc = scenario([station(0, 9.0)], [request(0, 780, 0.0), request(1, 800, 9.0)])
    model = MasterModel(cfg, np.random.default_rng(0))
    sim, pushed = collect_episode(sc, 0, cfg, model.actor)
    assert len(pushed) == 1
    tr, minute = pushed[0]
    assert (tr.t_minute, tr.next_minute, minute) == (780, 800, 830)
    assert sim.finish_minute(0) == 798


def test_single_request_day_yields_nothing(cfg):
    sc = scenario([station(0, 1.0)], [request(0, 100, 0.0)])
    model = MasterModel(cfg, np.random.default_rng(0))
    assert collect_episode(sc, 0, cfg, model.actor)[1] == []


def tiny(seed=3, n_days=4):
    return generate(GeneratorConfig(n_stations=3, capacity_range=(1, 1), n_days=n_days, city_extent=6.0,
                                    mean_rate=0.05, seed=seed))


def test_stored_returns_match_event_log_oracle():
    cfg = TrainConfig(k=3)
    sc = tiny()
    model = MasterModel(cfg, np.random.default_rng(1))
    sim, pushed = collect_episode(sc, 0, cfg, model.actor, seed=2)
    assert len(pushed) > 20
    for tr, minute in pushed:
        r_cwt, r_cp = oracle_return(sim.log, tr.t_minute, tr.next_minute, cfg.gamma)
        assert abs(tr.ret_cwt - r_cwt) < 1e-9 and abs(tr.ret_cp - r_cp) < 1e-9
        assert tr.trace_horizon <= tr.assembled_at == minute
        assert tr.dt >= 1 and len(tr.active) == len(tr.next_active) == 3


def test_replay_buffer_evicts_oldest():
    cfg = TrainConfig(k=3)
    sc = tiny()
    model = MasterModel(cfg, np.random.default_rng(1))
    _, pushed = collect_episode(sc, 0, cfg, model.actor, seed=2)
    buf = ReplayBuffer(5)
    for tr, _ in pushed[:8]:
        buf.push(tr)
    assert len(buf) == 5
    assert [t.request_id for t in buf.items] == [t.request_id for t, _ in pushed[3:8]]
    batch = buf.sample(5, np.random.default_rng(0))
    want = stack_transitions([t for t, _ in pushed[3:8]])
    assert sorted(batch["ret_cwt"].tolist()) == sorted(want["ret_cwt"].tolist())
    with pytest.raises(ValueError):
        ReplayBuffer(0)


# ---- training loop -------------------------------------------------------

def test_zero_iterations_returns_initial_model():
    cfg = TrainConfig(iterations=0, k=3)
    res = train(tiny(), cfg, "cwt-only", [0, 1])
    assert res.history == [] and res.beta_trace == []
    fresh = MasterModel(cfg, np.random.default_rng([cfg.seed, 1]), objectives=("cwt",))
    assert np.array_equal(res.model.actor.weights[0], fresh.actor.weights[0])


def test_multi_without_optima_is_refused():
    with pytest.raises(TrainingError, match="pretrain"):
        train(tiny(), TrainConfig(iterations=1, k=3), "multi", [0])


def test_training_is_deterministic():
    cfg = TrainConfig(iterations=2, k=3, batch_size=8)
    a = train(tiny(), cfg, "cwt-only", [0, 1], [2])
    b = train(tiny(), cfg, "cwt-only", [0, 1], [2])
    assert a.history == b.history and a.beta_trace == b.beta_trace
    assert len(a.history) == 2 and a.history[0]["L_cwt"] is not None
    assert np.array_equal(a.model.actor.weights[0], b.model.actor.weights[0])


def test_multi_mode_beta_stays_inside_unit_interval():
    cfg = TrainConfig(iterations=2, k=3, batch_size=8)
    sc = tiny()
    opt = {}
    for mode, obj in (("cwt-only", "cwt"), ("cp-only", "cp")):
        opt[obj] = train(sc, cfg, mode, [0]).model.frozen(obj)
    res = train(sc, cfg, "multi", [0, 1], optimal=opt)
    beta = np.array(res.beta_trace)
    assert beta.size > 0 and np.all((beta > 0) & (beta < 1))
