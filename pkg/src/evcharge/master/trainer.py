"""The training loop: rollouts, delayed ingestion, updates, validation, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..domain import ConfigError, TrainConfig, reward_pair
from ..metrics import MetricsReport, report_for_days
from ..nn import load_checkpoint, save_checkpoint
from ..simulator import Simulation, episode_seed, run_days
from .executor import MasterPolicy
from .model import OBJECTIVES, FrozenPolicy, MasterModel, update_step
from .replay import ReplayBuffer, TransitionCollector

log = logging.getLogger(__name__)

MODES = ("cwt-only", "cp-only", "multi", "avg")
HISTORY_HEADER = ["iteration", "episode", "L_cwt", "L_cp", "beta_mean",
                  "val_MCWT", "val_MCP", "val_TSF", "val_CFR"]


class TrainingError(RuntimeError):
    pass


def objectives_for(mode: str):
    if mode == "cwt-only":
        return ("cwt",)
    if mode == "cp-only":
        return ("cp",)
    if mode == "multi":
        return OBJECTIVES
    if mode == "avg":
        return ("avg",)
    raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def validation_score(outcomes_per_day, cfg: TrainConfig, mode: str) -> float:
    """Negative mean reward of the mode's objective over accepted requests (lower is better)."""
    s_cwt, s_cp = cfg.reward_scales
    vals = []
    for day in outcomes_per_day:
        for o in day:
            if not o.accepted:
                continue
            r_cwt, r_cp = reward_pair(o, cfg)
            if mode == "cwt-only":
                vals.append(r_cwt)
            elif mode == "cp-only":
                vals.append(r_cp)
            else:
                vals.append(0.5 * (r_cwt * s_cwt + r_cp * s_cp))
    return -float(np.mean(vals)) if vals else 0.0


@dataclass
class TrainResult:
    model: MasterModel
    mode: str
    history: List[dict] = field(default_factory=list)
    beta_trace: List[float] = field(default_factory=list)
    best_iteration: int = -1
    best_report: Optional[MetricsReport] = None
    transitions: list = field(default_factory=list)


def make_model(cfg: TrainConfig, mode: str, critic_kind: str = "attentive") -> MasterModel:
    rng = np.random.default_rng([cfg.seed, 1])
    model = MasterModel(cfg, rng, critic_kind=critic_kind, objectives=objectives_for(mode))
    return model


def evaluate(scenario, days, actor, cfg: TrainConfig, seed: Optional[int] = None):
    """Noise-free rollouts of ``actor`` on ``days``; returns per-day outcome lists."""
    policy = MasterPolicy(actor, cfg.k)
    return run_days(scenario, days, policy, cfg, cfg.seed if seed is None else seed)


def train(scenario, cfg: TrainConfig, mode: str, train_days: Sequence[int],
          val_days: Sequence[int] = (), optimal: Optional[Dict[str, FrozenPolicy]] = None,
          critic_kind: str = "attentive", keep_transitions: bool = False,
          progress: Optional[Callable[[dict], None]] = None, select_best: bool = True) -> TrainResult:
    """Train a shared actor with delayed-access replay.

    ``mode`` selects the critics: "cwt-only" / "cp-only" pretrain a single
    objective, "multi" trains both with dynamic re-weighting against the
    frozen optima in ``optimal``, and "avg" trains one critic on the mean of
    the two scaled rewards (used by the IDDPG baseline and the static-weight
    variant).

    With ``val_days`` every iteration is validated; ``select_best`` then
    restores the best-scoring snapshot, otherwise the final iterate is kept.
    """
    objectives_for(mode)
    if mode == "multi":
        missing = [o for o in OBJECTIVES if not optimal or o not in optimal]
        if missing:
            raise TrainingError(
                "multi mode needs well-trained objective-specific networks (pretrain with "
                f"cwt-only and cp-only first); missing: {', '.join(missing)}")
    if not train_days:
        raise ConfigError("no training days")
    model = make_model(cfg, mode, critic_kind)
    if mode == "multi":
        model.optimal = dict(optimal)
    result = TrainResult(model, mode)
    if cfg.iterations == 0:
        return result

    buffer = ReplayBuffer(cfg.buffer_capacity)
    sample_rng = np.random.default_rng([cfg.seed, 2])
    noise_rng = np.random.default_rng([cfg.seed, 3])
    order_rng = np.random.default_rng([cfg.seed, 4])
    order: List[int] = []
    best_score = math.inf
    best_snapshot = None
    last_report = None
    min_fill = max(cfg.batch_size, cfg.warmup)

    for it in range(cfg.iterations):
        if not order:
            order = list(order_rng.permutation(list(train_days)))
        day = int(order.pop(0))
        frac = it / (cfg.iterations - 1) if cfg.iterations > 1 else 1.0
        noise = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac
        collector = TransitionCollector(cfg.gamma, cfg.d, self_obs=critic_kind == "independent")
        policy = MasterPolicy(model.actor, cfg.k, noise, noise_rng, collector)
        losses = {name: [] for name in model.trained}
        betas = []

        def push(tr):
            buffer.push(tr, cfg.use_trace)
            if keep_transitions:
                result.transitions.append(tr)

        def observer(sim, minute):
            collector.observe(sim, minute)
            collector.ingest_when_available(sim, minute, push)
            for _ in sim.requests_at(minute):
                if len(buffer) < min_fill:
                    break
                stats = update_step(model, buffer.sample(cfg.batch_size, sample_rng), mode)
                for name, v in stats.losses.items():
                    losses[name].append(v)
                betas.append(stats.beta)

        sim = Simulation(scenario, day, cfg, rng_seed=[cfg.seed, 1_000_000 + it])
        sim.run(policy, observer)
        collector.flush(sim, push)
        result.beta_trace.extend(betas)

        row = {"iteration": it, "episode": day,
               "L_cwt": _mean(losses.get("cwt", losses.get("avg"))),
               "L_cp": _mean(losses.get("cp")),
               "beta_mean": _mean(betas)}
        if val_days:
            outs = evaluate(scenario, val_days, model.actor, cfg)
            rep = report_for_days(outs)
            score = validation_score(outs, cfg, mode)
            row.update(val_MCWT=rep.mcwt, val_MCP=rep.mcp, val_TSF=rep.tsf, val_CFR=rep.cfr, score=score)
            last_report = rep
            if select_best and score < best_score:
                best_score = score
                best_snapshot = model.snapshot()
                result.best_iteration = it
                result.best_report = rep
        result.history.append(row)
        if progress is not None:
            progress(row)
        log.info("iter %d day %d L_cwt=%s L_cp=%s beta=%s", it, day, row["L_cwt"], row["L_cp"], row["beta_mean"])

    if best_snapshot is not None:
        model.load_groups(best_snapshot)
    else:
        result.best_iteration = cfg.iterations - 1
        result.best_report = last_report
    return result


def train_pipeline(scenario, cfg: TrainConfig, train_days: Sequence[int], val_days: Sequence[int] = (),
                   progress: Optional[Callable[[dict], None]] = None):
    """Pretrain both objective-specific optima, then the multi-objective model.

    The optima keep their final iterate: a validation-chosen early snapshot
    pairs a good actor with an immature critic, which skews the gap ratios.
    Returns ``(multi_result, {"cwt": result, "cp": result})``.
    """
    pre = {}
    for mode, obj in (("cwt-only", "cwt"), ("cp-only", "cp")):
        pre[obj] = train(scenario, cfg, mode, train_days, val_days, progress=progress, select_best=False)
    optimal = {obj: res.model.frozen(obj) for obj, res in pre.items()}
    return train(scenario, cfg, "multi", train_days, val_days, optimal=optimal, progress=progress), pre


def _mean(xs):
    if not xs:
        return None
    return float(np.mean(xs))


def write_history(history: List[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow(["" if row.get(k) is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in HISTORY_HEADER])


def save_model(result_or_model, path, cfg: TrainConfig, mode: str, iteration: int,
               metrics: Optional[dict] = None, critic_kind: str = "attentive") -> None:
    model = result_or_model.model if isinstance(result_or_model, TrainResult) else result_or_model
    manifest = {"mode": mode, "cfg_hash": config_hash(cfg), "iteration": iteration,
                "critic_kind": critic_kind, "objectives": list(model.objectives),
                "validation": metrics or {}, "config": cfg.to_dict()}
    save_checkpoint(path, model.groups(), manifest)


def load_model(path, cfg: Optional[TrainConfig] = None):
    groups, manifest = load_checkpoint(path)
    if manifest is None:
        raise TrainingError(f"{path}: checkpoint has no manifest")
    if cfg is None:
        cfg = TrainConfig(**manifest["config"])
    model = MasterModel(cfg, np.random.default_rng(0), critic_kind=manifest.get("critic_kind", "attentive"),
                        objectives=tuple(manifest["objectives"]))
    model.load_groups(groups)
    return model, manifest
