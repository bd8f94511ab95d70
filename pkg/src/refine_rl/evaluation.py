"""Deterministic policy evaluation, normalized scores and multi-seed pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from refine_rl.agent import Agent, policy_fn
from refine_rl.data import NormStats
from refine_rl.envs import EnvSpec, ReferenceScores, rollout


@dataclass
class EvalReport:
    env: str
    returns: list[float]
    mean: float
    std: float
    episodes: int
    seed: int


@dataclass
class AggregateReport:
    env: str
    reports: list[EvalReport]
    mean: float
    std: float
    normalized_mean: float
    normalized_std: float


def evaluate_policy(agent: Agent, spec: EnvSpec, stats: NormStats, episodes: int,
                    seed: int) -> EvalReport:
    """``episodes`` noise-free episodes on sub-seeds split from ``seed``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    eps = rollout(spec, policy_fn(agent, stats), seed, episodes, exploration_sigma=0.0)
    returns = [e.ret for e in eps]
    return EvalReport(spec.name, returns, float(np.mean(returns)), float(np.std(returns)),
                      episodes, seed)


def normalized_score(raw_return, refs: ReferenceScores):
    """100 * (raw - random) / (expert - random); works on scalars and arrays."""
    gap = refs.expert_return - refs.random_return
    if not gap > 0:
        raise ValueError(f"degenerate reference scores for {refs.env}: gap {gap}")
    return 100.0 * (raw_return - refs.random_return) / gap


def aggregate(reports: list[EvalReport], refs: ReferenceScores) -> AggregateReport:
    """Pool every episode of every report; population std in raw and normalized units."""
    if not reports:
        raise ValueError("aggregate needs at least one report")
    envs = {r.env for r in reports}
    if len(envs) != 1:
        raise ValueError(f"cannot pool reports from different environments: {sorted(envs)}")
    env = envs.pop()
    if refs.env != env:
        raise ValueError(f"reference scores are for {refs.env}, reports for {env}")
    pooled = np.array([x for r in reports for x in r.returns])
    norm = normalized_score(pooled, refs)
    return AggregateReport(env, list(reports), float(pooled.mean()), float(pooled.std()),
                           float(norm.mean()), float(norm.std()))
