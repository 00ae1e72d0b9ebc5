"""Multi-agent actor-critic recommendation with competition-aware critics."""

from .executor import MasterPolicy, observation_matrix
from .model import (
    OBJECTIVES,
    AttentiveCritic,
    FrozenPolicy,
    IndependentCritic,
    MasterModel,
    act,
    actor_update,
    critic_update,
    encode_trace,
    gap_ratio,
    reweight,
    select_station,
    update_step,
)
from .replay import DelayedTransition, ReplayBuffer, TransitionCollector, oracle_return
from .trainer import MODES, TrainResult, TrainingError, evaluate, load_model, save_model, train, train_pipeline

__all__ = [
    "OBJECTIVES", "MODES", "AttentiveCritic", "IndependentCritic", "FrozenPolicy", "MasterModel",
    "MasterPolicy", "DelayedTransition", "ReplayBuffer", "TransitionCollector", "TrainResult",
    "TrainingError", "act", "actor_update", "critic_update", "encode_trace", "evaluate", "gap_ratio",
    "load_model", "observation_matrix", "oracle_return", "reweight", "save_model", "select_station",
    "train", "train_pipeline", "update_step",
]
