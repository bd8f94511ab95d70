"""Generate the four-level offline dataset suite for an environment.

A behaviour agent is trained online with plain TD3. Its best evaluation
checkpoint is the expert; the first checkpoint after training starts that
reaches a third of the random-to-expert gap is the medium policy. From these:

* ``expert``         exploration-noise rollouts of the expert policy
* ``medium``         exploration-noise rollouts of the medium policy
* ``medium_replay``  the behaviour agent's replay buffer up to the medium checkpoint
* ``medium_expert``  ``medium ++ expert``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from refine_rl.agent import Agent, Hyperparams, policy_fn
from refine_rl.data import NormStats, ReplayBuffer, TransitionDataset, concatenate
from refine_rl.envs import EnvError, EnvSpec, Policy, ReferenceScores, compute_reference_scores, run_episode
from refine_rl.evaluation import normalized_score
from refine_rl.nn import Mlp
from refine_rl.rng import Rng, derive_seed
from refine_rl.training import RunLog, train_online_td3

log = logging.getLogger(__name__)

EXPERT_TAG = 0xE1
MEDIUM_TAG = 0x3D
REFS_TAG = 0x4EF


class SuiteError(RuntimeError):
    pass


@dataclass
class Snapshot:
    step: int
    buffer_size: int
    mean_return: float
    actor: Mlp


@dataclass
class Suite:
    datasets: dict[str, TransitionDataset]
    expert: Agent
    medium: Agent
    refs: ReferenceScores
    behavior_log: RunLog
    snapshots: list[Snapshot] = field(repr=False, default_factory=list)
    expert_step: int = 0
    medium_step: int = 0


def collect_transitions(spec: EnvSpec, policy: Policy, seed: int, n: int,
                        exploration_sigma: float, level: str) -> TransitionDataset:
    """Exactly ``n`` transitions from consecutive noisy episodes."""
    parts, total, i = [], 0, 0
    while total < n:
        ep = run_episode(spec, policy, Rng(derive_seed(seed, i)), exploration_sigma,
                         max_steps=n - total)
        parts.append(ep)
        total += len(ep)
        i += 1

    def cat(name):
        return np.concatenate([getattr(e, name) for e in parts])
    return TransitionDataset(spec.name, level, cat("obs"), cat("actions"), cat("rewards"),
                             cat("next_obs"), cat("terminals"), {"episodes": str(i)})


def _with_actor(agent: Agent, actor: Mlp) -> Agent:
    out = agent.copy()
    out.actor = actor.copy()
    out.target_actor = actor.copy()
    return out


def generate_suite(spec: EnvSpec, seed: int, sizes: tuple[int, int] = (50_000, 50_000),
                   hp: Hyperparams | None = None, *, behavior_steps: int = 20_000,
                   behavior_prefill: int = 5_000, behavior_eval_every: int = 100,
                   ref_episodes: int = 100) -> Suite:
    expert_n, medium_n = sizes
    if expert_n < 1000 or medium_n < 1000:
        raise ValueError("suite sizes must be at least 1000 transitions each")
    hp = hp or Hyperparams()
    snapshots: list[Snapshot] = []

    def on_eval(agent: Agent, buf: ReplayBuffer) -> None:
        snapshots.append(Snapshot(agent.step, buf.size, float("nan"), agent.actor.copy()))

    final, buf, blog = train_online_td3(spec, hp, seed, prefill=behavior_prefill,
                                        n_steps=behavior_steps, eval_every=behavior_eval_every,
                                        on_eval=on_eval)
    for snap, row in zip(snapshots, blog.rows):
        snap.mean_return = row.mean_return

    stats = NormStats.identity(spec.obs_dim)
    # the untrained network is not a behaviour policy, whatever it scores
    trained = [s for s in snapshots if s.step > 0] or snapshots
    best = max(trained, key=lambda s: s.mean_return)
    expert = _with_actor(final, best.actor)
    try:
        refs = compute_reference_scores(spec, policy_fn(expert, stats), derive_seed(seed, REFS_TAG),
                                        ref_episodes)
    except EnvError as exc:
        curve = ", ".join(f"{r.step}:{r.mean_return:.1f}" for r in blog.rows)
        raise SuiteError(f"behaviour training on {spec.name} never beat the random policy "
                         f"({exc}); evaluation curve step:return = {curve}") from exc

    threshold = refs.random_return + (refs.expert_return - refs.random_return) / 3.0
    medium_snap = next((s for s in trained if s.mean_return >= threshold), best)
    medium = _with_actor(final, medium_snap.actor)
    log.info("%s: random %.2f expert %.2f (step %d) medium step %d return %.2f (norm %.1f)",
             spec.name, refs.random_return, refs.expert_return, best.step, medium_snap.step,
             medium_snap.mean_return, normalized_score(medium_snap.mean_return, refs))

    common = {
        "seed": str(seed), "behavior_algo": "td3", "behavior_steps": str(behavior_steps),
        "behavior_prefill": str(behavior_prefill), "hidden": str(hp.hidden),
        "exploration_sigma": repr(hp.exploration_sigma),
    }
    sigma = hp.exploration_sigma
    exp_ds = collect_transitions(spec, policy_fn(expert, stats), derive_seed(seed, EXPERT_TAG),
                                 expert_n, sigma, "expert")
    exp_ds.metadata.update(common, behavior_policy=f"expert@{best.step}")
    med_ds = collect_transitions(spec, policy_fn(medium, stats), derive_seed(seed, MEDIUM_TAG),
                                 medium_n, sigma, "medium")
    med_ds.metadata.update(common, behavior_policy=f"medium@{medium_snap.step}")
    replay = buf.to_dataset(spec.name, "medium_replay", medium_snap.buffer_size,
                            dict(common, behavior_policy=f"replay@{medium_snap.step}",
                                 buffer_size=str(medium_snap.buffer_size)))
    med_exp = concatenate(med_ds, exp_ds, "medium_expert",
                          dict(common, behavior_policy="medium++expert"))
    datasets = {"expert": exp_ds, "medium": med_ds, "medium_replay": replay,
                "medium_expert": med_exp}
    return Suite(datasets, expert, medium, refs, blog, snapshots, best.step, medium_snap.step)
