"""Shared actor, attentive (or independent) critics, trace encoder and their updates.

Batch layout used throughout: ``obs (B, K, OBS_DIM)``, ``actions (B, K)``,
``traces (B, K, d)`` (already divided by station capacity), where ``K`` is
the active-set size.  Attentive critics return ``Q`` of shape ``(B,)``;
independent (IDDPG) critics return one value per agent, ``(B, K)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..domain import OBS_DIM, TrainConfig
from ..nn import (
    AdamState,
    AttentionParams,
    NetParams,
    adam_step,
    attention_backward,
    attention_forward,
    copy_into,
    mlp_backward,
    mlp_forward,
    soft_update,
)

OBJECTIVES = ("cwt", "cp")


def encode_trace(W_p: np.ndarray, trace) -> np.ndarray:
    """relu(W_p @ I) for a single trace (d,) or any batch (..., d)."""
    trace = np.asarray(trace, dtype=float)
    if trace.shape[-1] != W_p.shape[1]:
        raise ValueError(f"trace length {trace.shape[-1]} != encoder input {W_p.shape[1]}")
    return np.maximum(trace @ W_p.T, 0.0)


class AttentiveCritic:
    """Q = head(attention([o, a, p] over the active set))."""

    kind = "attentive"

    def __init__(self, attention: AttentionParams, head: NetParams):
        self.attention = attention
        self.head = head

    @classmethod
    def init(cls, feature_dim, cfg: TrainConfig, rng) -> "AttentiveCritic":
        att = AttentionParams.init(feature_dim, cfg.attention_dim, cfg.hidden, rng)
        head = NetParams.init([cfg.hidden, cfg.hidden, cfg.hidden, 1], rng)
        return cls(att, head)

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {f"att.{k}": v for k, v in self.attention.arrays().items()}
        out.update({f"head.{k}": v for k, v in self.head.arrays().items()})
        return out

    def copy(self) -> "AttentiveCritic":
        return AttentiveCritic(self.attention.copy(), self.head.copy())

    def forward(self, features):
        x, alpha, acache = attention_forward(self.attention, features)
        q, hcache = mlp_forward(self.head, x)
        return q[..., 0], (acache, hcache, alpha)

    def backward(self, cache, dq):
        acache, hcache, _ = cache
        hgrads, dx = mlp_backward(self.head, hcache, np.asarray(dq, dtype=float)[..., None])
        agrads, dfeat = attention_backward(self.attention, acache, dx)
        grads = {f"att.{k}": v for k, v in agrads.items()}
        grads.update({f"head.{k}": v for k, v in hgrads.items()})
        return grads, dfeat


class IndependentCritic:
    """Per-agent Q(o_i, a_i, p_i); the IDDPG baseline critic."""

    kind = "independent"

    def __init__(self, net: NetParams):
        self.net = net

    @classmethod
    def init(cls, feature_dim, cfg: TrainConfig, rng) -> "IndependentCritic":
        return cls(NetParams.init([feature_dim, cfg.hidden, cfg.hidden, 1], rng))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {f"net.{k}": v for k, v in self.net.arrays().items()}

    def copy(self) -> "IndependentCritic":
        return IndependentCritic(self.net.copy())

    def forward(self, features):
        f = np.asarray(features, dtype=float)
        lead = f.shape[:-1]
        q, cache = mlp_forward(self.net, f.reshape(-1, f.shape[-1]))
        return q[:, 0].reshape(lead), (cache, lead)

    def backward(self, cache, dq):
        mcache, lead = cache
        grads, df = mlp_backward(self.net, mcache, np.asarray(dq, dtype=float).reshape(-1, 1))
        return {f"net.{k}": v for k, v in grads.items()}, df.reshape(lead + (df.shape[-1],))


def critic_eval(critic, W_p, obs, actions, traces, with_cache=False):
    """Q for aligned per-agent observations, actions and traces."""
    obs = np.asarray(obs, dtype=float)
    actions = np.asarray(actions, dtype=float)
    traces = np.asarray(traces, dtype=float)
    if obs.shape[:-1] != actions.shape or traces.shape[:-1] != actions.shape:
        raise ValueError(f"misaligned critic inputs: obs {obs.shape}, actions {actions.shape}, "
                         f"traces {traces.shape}")
    p = encode_trace(W_p, traces)
    feats = np.concatenate([obs, actions[..., None], p], axis=-1)
    q, cache = critic.forward(feats)
    if with_cache:
        return q, (cache, traces, p, obs.shape[-1])
    return q


def critic_backward(critic, W_p, full_cache, dq):
    """Returns (critic grads, W_p grad, dQ/da)."""
    cache, traces, p, odim = full_cache
    grads, dfeat = critic.backward(cache, dq)
    da = dfeat[..., odim]
    dp = dfeat[..., odim + 1:] * (p > 0)
    dW_p = dp.reshape(-1, dp.shape[-1]).T @ traces.reshape(-1, traces.shape[-1])
    return grads, dW_p, da


def select_station(active_ids, bids, etas) -> int:
    """Highest bid; ties go to the lower ETA, then the lower station id."""
    if len(active_ids) == 0:
        raise ValueError("empty candidate set")
    if not len(active_ids) == len(bids) == len(etas):
        raise ValueError("active_ids, bids and etas must have equal length")
    best = max(range(len(active_ids)), key=lambda j: (bids[j], -etas[j], -active_ids[j]))
    return int(active_ids[best])


def act(actor: NetParams, observation, noise: float = 0.0, rng=None):
    """Bid(s) in [-1, 1] for normalized observation vector(s)."""
    out, _ = mlp_forward(actor, observation)
    bid = out[..., 0]
    if noise > 0:
        bid = np.clip(bid + rng.normal(0.0, noise, size=np.shape(bid)), -1.0, 1.0)
    return bid


def reweight(g_cwt, g_cp, sigma: float):
    """Boltzmann weight of the CWT objective; overflow-safe logistic form."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    a = np.asarray(g_cwt, dtype=float) / sigma
    b = np.asarray(g_cp, dtype=float) / sigma
    m = np.maximum(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    beta = ea / (ea + eb)
    return float(beta) if np.ndim(beta) == 0 else beta


def gap_ratio(q_opt, q, floor: float = 1e-6):
    """(Q* - Q) / |Q*|, defined as 0 where |Q*| < floor."""
    q_opt = np.asarray(q_opt, dtype=float)
    q = np.asarray(q, dtype=float)
    denom = np.abs(q_opt)
    safe = np.where(denom < floor, 1.0, denom)
    g = np.where(denom < floor, 0.0, (q_opt - q) / safe)
    return float(g) if g.ndim == 0 else g


@dataclass
class FrozenPolicy:
    """Objective-specific optimum: actor, critic and its own trace encoder."""

    actor: NetParams
    critic: object
    W_p: np.ndarray


@dataclass
class UpdateStats:
    losses: Dict[str, float]
    beta: float
    grad_norm: float


class MasterModel:
    """Shared actor and per-objective critics with target copies.

    ``objectives`` lists the critics that exist ("cwt", "cp", or "avg" for
    the single averaged-reward critic).  ``trained`` is the subset updated
    in the current mode.
    """

    def __init__(self, cfg: TrainConfig, rng, critic_kind: str = "attentive",
                 objectives=OBJECTIVES):
        self.cfg = cfg
        self.critic_kind = critic_kind
        self.objectives = tuple(objectives)
        self.feature_dim = OBS_DIM + 1 + cfg.trace_dim
        self.actor = NetParams.init([OBS_DIM, cfg.hidden, cfg.hidden, 1], rng, out_activation="tanh")
        cls = AttentiveCritic if critic_kind == "attentive" else IndependentCritic
        self.critics = {name: cls.init(self.feature_dim, cfg, rng) for name in self.objectives}
        bound = 1.0 / np.sqrt(cfg.d)
        self.W_p = rng.uniform(-bound, bound, size=(cfg.trace_dim, cfg.d))
        self.actor_target = self.actor.copy()
        self.critic_targets = {k: c.copy() for k, c in self.critics.items()}
        self.W_p_target = self.W_p.copy()
        self.optimal: Dict[str, FrozenPolicy] = {}
        self.actor_opt = AdamState(cfg.lr)
        self.critic_opt = AdamState(cfg.lr)
        self.trained = self.objectives

    # ---- parameter views --------------------------------------------------

    def critic_arrays(self, names=None) -> Dict[str, np.ndarray]:
        out = {"W_p": self.W_p}
        for name in (names or self.objectives):
            out.update({f"{name}.{k}": v for k, v in self.critics[name].arrays().items()})
        return out

    def target_critic_arrays(self, names=None) -> Dict[str, np.ndarray]:
        out = {"W_p": self.W_p_target}
        for name in (names or self.objectives):
            out.update({f"{name}.{k}": v for k, v in self.critic_targets[name].arrays().items()})
        return out

    def groups(self) -> Dict[str, Dict[str, np.ndarray]]:
        g = {"actor": self.actor.arrays(), "actor_target": self.actor_target.arrays(),
             "critic": self.critic_arrays(), "critic_target": self.target_critic_arrays()}
        for name, fp in self.optimal.items():
            g[f"optimal_{name}_actor"] = fp.actor.arrays()
            arrs = {f"{name}.{k}": v for k, v in fp.critic.arrays().items()}
            arrs["W_p"] = fp.W_p
            g[f"optimal_{name}_critic"] = arrs
        return g

    def load_groups(self, groups) -> None:
        copy_into(self.actor.arrays(), groups["actor"])
        copy_into(self.actor_target.arrays(), groups["actor_target"])
        copy_into(self.critic_arrays(), groups["critic"])
        copy_into(self.target_critic_arrays(), groups["critic_target"])

    def snapshot(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {g: {k: v.copy() for k, v in arrs.items()} for g, arrs in self.groups().items()
                if not g.startswith("optimal_")}

    def frozen(self, objective: str) -> FrozenPolicy:
        """Detached copy of the actor and one critic, for use as an optimum."""
        return FrozenPolicy(self.actor.copy(), self.critics[objective].copy(), self.W_p.copy())

    # ---- evaluation helpers ---------------------------------------------

    def q(self, name, obs, actions, traces, target=False, with_cache=False):
        critic = (self.critic_targets if target else self.critics)[name]
        W_p = self.W_p_target if target else self.W_p
        return critic_eval(critic, W_p, obs, actions, traces, with_cache)

    def soft_update_targets(self, tau: float) -> None:
        soft_update(self.actor_target.arrays(), self.actor.arrays(), tau)
        soft_update(self.target_critic_arrays(), self.critic_arrays(), tau)


def _reward_columns(model: MasterModel, batch) -> Dict[str, np.ndarray]:
    s_cwt, s_cp = model.cfg.reward_scales
    r_cwt = batch["ret_cwt"] * s_cwt
    r_cp = batch["ret_cp"] * s_cp
    return {"cwt": r_cwt, "cp": r_cp, "avg": 0.5 * (r_cwt + r_cp)}


def critic_targets(model: MasterModel, batch) -> Dict[str, np.ndarray]:
    """y = R + gamma**dt * Q'(next state, target-actor actions) per trained critic."""
    rewards = _reward_columns(model, batch)
    disc = model.cfg.gamma ** batch["dt"]
    out = {}
    for name in model.trained:
        if model.critic_kind == "attentive":
            nobs, ntr = batch["next_obs"], batch["next_traces"]
        else:
            nobs, ntr = batch["next_self_obs"], batch["next_self_traces"]
        na = act(model.actor_target, nobs)
        qn = model.q(name, nobs, na, ntr, target=True)
        if qn.ndim == 2:
            out[name] = rewards[name][:, None] + disc[:, None] * qn
        else:
            out[name] = rewards[name] + disc * qn
    return out


def critic_update(model: MasterModel, batch) -> Dict[str, float]:
    """One Adam descent step on every trained critic plus the shared encoder.

    Returns the mean-squared TD losses measured before the step.
    """
    if len(batch["dt"]) == 0:
        raise ValueError("empty batch")
    ys = critic_targets(model, batch)
    grads = {"W_p": np.zeros_like(model.W_p)}
    losses = {}
    for name in model.trained:
        q, cache = model.q(name, batch["obs"], batch["actions"], batch["traces"], with_cache=True)
        err = q - ys[name]
        losses[name] = float(np.mean(err * err))
        dq = 2.0 * err / err.size
        cgrads, dW_p, _ = critic_backward(model.critics[name], model.W_p, cache, dq)
        grads["W_p"] += dW_p
        grads.update({f"{name}.{k}": v for k, v in cgrads.items()})
    adam_step(model.critic_opt, model.critic_arrays(model.trained), grads)
    return losses


def action_gradients(model: MasterModel, batch, weights: Dict[str, float], actions=None,
                     critics=None):
    """Sum_c w_c * dQ_c/da at the given actions (default: current actor, no noise).

    Per-item weights may be arrays of shape (B,).  Values are averaged over
    the batch, so the result is the batch-mean policy-gradient signal.
    """
    obs, traces = batch["obs"], batch["traces"]
    if actions is None:
        actions = act(model.actor, obs)
    critics = critics or {}
    B = obs.shape[0]
    total = np.zeros_like(actions)
    for name, w in weights.items():
        critic, W_p = critics.get(name, (model.critics[name], model.W_p))
        q, cache = critic_eval(critic, W_p, obs, actions, traces, with_cache=True)
        w = np.asarray(w, dtype=float)
        if q.ndim == 2 and w.ndim == 1:
            w = w[:, None]
        dq = np.broadcast_to(w / B, q.shape)
        _, _, da = critic_backward(critic, W_p, cache, dq)
        total += da
    return total


def policy_gradient(actor: NetParams, obs, dq_da, preact_reg: float = 0.0):
    """Chain dQ/da through the shared actor; sums over agents and batch items.

    ``preact_reg`` subtracts preact_reg * mean_b sum_i z_i^2 from the ascent
    objective, z being the pre-tanh bid; it keeps bids off the saturated
    plateau where every agent ties at 1.
    """
    flat = obs.reshape(-1, obs.shape[-1])
    _, cache = mlp_forward(actor, flat)
    pre = None
    if preact_reg:
        z = cache["layers"][-1][1]
        pre = -2.0 * preact_reg * z / obs.shape[0]
    grads, _ = mlp_backward(actor, cache, np.asarray(dq_da).reshape(-1, 1), pre)
    return grads


def gap_ratios(model: MasterModel, batch) -> Tuple[np.ndarray, np.ndarray]:
    """Per-item gap ratios of the current policy against the frozen optima."""
    missing = [o for o in OBJECTIVES if o not in model.optimal]
    if missing:
        raise ValueError(f"gap ratios need frozen optimal networks for {missing}")
    obs, traces = batch["obs"], batch["traces"]
    a = act(model.actor, obs)
    out = []
    for name in OBJECTIVES:
        fp = model.optimal[name]
        q_opt = critic_eval(fp.critic, fp.W_p, obs, act(fp.actor, obs), traces)
        q_cur = model.q(name, obs, a, traces)
        out.append(gap_ratio(q_opt, q_cur))
    return out[0], out[1]


def actor_update(model: MasterModel, batch, beta) -> float:
    """One Adam ascent step along beta * grad J_cwt + (1 - beta) * grad J_cp.

    With a single trained critic (single-objective or averaged-reward modes)
    the weight of that critic is 1.  Returns the gradient norm.
    """
    if len(batch["dt"]) == 0:
        raise ValueError("empty batch")
    if set(model.trained) == set(OBJECTIVES):
        weights = {"cwt": beta, "cp": 1.0 - np.asarray(beta)}
    else:
        weights = {name: 1.0 for name in model.trained}
    dq_da = action_gradients(model, batch, weights)
    grads = policy_gradient(model.actor, batch["obs"], dq_da, model.cfg.preact_reg)
    adam_step(model.actor_opt, model.actor.arrays(), grads, ascent=True)
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def update_step(model: MasterModel, batch, mode: str) -> UpdateStats:
    """Critic step, weight computation, actor step and target soft updates."""
    losses = critic_update(model, batch)
    if mode == "multi":
        g_cwt, g_cp = gap_ratios(model, batch)
        beta = float(np.mean(reweight(g_cwt, g_cp, model.cfg.sigma)))
    elif mode == "cp-only":
        beta = 0.0
    else:
        beta = 1.0
    norm = actor_update(model, batch, beta)
    model.soft_update_targets(model.cfg.tau)
    return UpdateStats(losses, beta, norm)
