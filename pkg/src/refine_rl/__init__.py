"""TD3-BC offline reinforcement learning with policy refinement and online fine-tuning."""

from refine_rl.agent import Agent, Hyperparams, UpdateReport, make_agent
from refine_rl.data import NormStats, ReplayBuffer, TransitionDataset
from refine_rl.envs import EnvSpec, ReferenceScores, get_spec
from refine_rl.training import (
    FinetuneSchedule, OfflineSchedule, RunLog, decay_rate, finetune_online, refine_policy,
    run_ablation, scale_alpha, train_offline,
)

__version__ = "0.1.0"

__all__ = [
    "Agent", "EnvSpec", "FinetuneSchedule", "Hyperparams", "NormStats", "OfflineSchedule",
    "ReferenceScores", "ReplayBuffer", "RunLog", "TransitionDataset", "UpdateReport",
    "decay_rate", "finetune_online", "get_spec", "make_agent", "refine_policy", "run_ablation",
    "scale_alpha", "train_offline",
]
