"""Training loops: offline TD3-BC, policy refinement, online fine-tuning, ablations.

Every loop draws minibatches and target-policy noise from the agent's own
random stream (``Agent.rng_state``), so a phase started from a saved agent
continues exactly where the previous one stopped. Evaluation uses a fixed,
separately seeded set of episodes per run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

from refine_rl.agent import (
    Agent, DivergenceError, Hyperparams, UpdateReport, actor_update, critic_update,
    make_agent, maybe_update_targets_and_actor, select_action, update_targets,
)
from refine_rl.data import (
    NormStats, ReplayBuffer, TransitionDataset, compute_norm_stats, sample_minibatch,
)
from refine_rl.envs import EnvSpec, ReferenceScores, get_spec, random_policy, reset, step
from refine_rl.evaluation import evaluate_policy, normalized_score
from refine_rl.rng import Rng, derive_seed

log = logging.getLogger(__name__)

ABLATION_MODES = ("none", "low_alpha_from_start", "refine_with_critic", "extended_baseline")

# derive_seed tags
INIT_TAG = 0x1
EVAL_TAG = 0xE7A1
ENV_TAG = 0xE4F

OnUpdate = Callable[[int, UpdateReport], None]


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the agent as of the failure."""

    def __init__(self, message: str, step: int, agent: Agent, phase: str):
        super().__init__(message)
        self.step = step
        self.agent = agent
        self.phase = phase


@dataclass
class OfflineSchedule:
    J: int = 100_000
    K: int = 25_000
    lam: float = 5.0
    eval_every: int = 5_000
    eval_episodes: int = 10
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if self.J < 0 or self.K < 0:
            raise ValueError("J and K must be >= 0")
        if self.lam < 1:
            raise ValueError(f"lambda must be >= 1, got {self.lam}")


@dataclass
class FinetuneSchedule:
    M: int = 5_000
    N: int = 24_500
    alpha_start: float = 0.4
    alpha_end: float = 0.2
    buffer_capacity: int = 0  # 0 means M + N, i.e. never overwrite
    eval_every: int = 5_000
    eval_episodes: int = 10

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if not 0 < self.alpha_end <= self.alpha_start:
            raise ValueError("need 0 < alpha_end <= alpha_start")

    @property
    def capacity(self) -> int:
        return self.buffer_capacity or self.M + self.N


@dataclass
class LogRow:
    step: int
    phase: str
    seed: int
    alpha: float
    mean_return: float
    std_return: float
    normalized_score: float


@dataclass
class RunLog:
    rows: list[LogRow] = field(default_factory=list)
    # BC coefficient in force when the phase ended
    final_alpha: float = float("nan")

    def append(self, row: LogRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"log steps must increase: {row.step} after {self.rows[-1].step}")
        self.rows.append(row)

    def extend(self, other: "RunLog") -> None:
        """Append ``other``, skipping rows at or before our last step (phase seams)."""
        for row in other.rows:
            if not self.rows or row.step > self.rows[-1].step:
                self.rows.append(row)
        self.final_alpha = other.final_alpha

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


def scale_alpha(alpha: float, lam: float) -> float:
    """Refinement coefficient alpha / lambda; lambda below 1 is rejected."""
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return alpha / lam


def decay_rate(alpha_start: float, alpha_end: float, n: int) -> float:
    """Per-step factor taking alpha_start to alpha_end in n multiplications."""
    if alpha_start <= 0 or alpha_end <= 0:
        raise ValueError("decay endpoints must be positive")
    if alpha_end > alpha_start:
        raise ValueError("alpha_end must not exceed alpha_start")
    if n < 1:
        raise ValueError("n must be >= 1")
    return math.exp(math.log(alpha_end / alpha_start) / n)


class _Evaluator:
    """Fixed evaluation episodes for one run, logged into a RunLog."""

    def __init__(self, spec: EnvSpec, stats: NormStats, refs: ReferenceScores | None,
                 seed: int, episodes: int, phase: str):
        self.spec = spec
        self.stats = stats
        self.refs = refs
        self.seed = seed
        self.eval_seed = derive_seed(seed, EVAL_TAG)
        self.episodes = episodes
        self.phase = phase
        self.log = RunLog()

    def __call__(self, agent: Agent, alpha: float) -> LogRow:
        rep = evaluate_policy(agent, self.spec, self.stats, self.episodes, self.eval_seed)
        norm = float(normalized_score(rep.mean, self.refs)) if self.refs else float("nan")
        row = LogRow(agent.step, self.phase, self.seed, alpha, rep.mean, rep.std, norm)
        self.log.append(row)
        log.info("%s seed=%d step=%d alpha=%.4g return=%.2f +- %.2f norm=%.1f",
                 self.phase, self.seed, agent.step, alpha, rep.mean, rep.std, norm)
        return row


def _due(k: int, total: int, every: int) -> bool:
    return every > 0 and (k % every == 0 or k == total)


def _offline_loop(agent: Agent, dataset: TransitionDataset, stats: NormStats, hp: Hyperparams,
                  n_steps: int, alpha: float, evaluator: _Evaluator | None, eval_every: int,
                  mode: str, on_update: OnUpdate | None) -> Agent:
    """Shared body of the offline phases.

    ``mode`` is ``"full"`` (critic step + delayed actor/targets), ``"actor"``
    (actor step + actor target only) or ``"bc"`` (delayed actor/targets with no
    critic step; the critic is irrelevant when the Q term is off).
    """
    rng = Rng(agent.rng_state)
    if evaluator and _due(0, n_steps, eval_every):
        evaluator(agent, alpha)
    for k in range(1, n_steps + 1):
        batch = sample_minibatch(dataset, hp.batch_size, rng, stats)
        try:
            if mode == "actor":
                report = actor_update(agent, batch, hp, alpha)
                update_targets(agent, hp.tau, critics=False)
                agent.target_syncs += 1
            else:
                if mode == "full":
                    c = critic_update(agent, batch, hp, rng)
                else:
                    c = UpdateReport()
                report = maybe_update_targets_and_actor(agent, batch, hp, alpha)
                report.critic_loss = c.critic_loss
        except (DivergenceError, FloatingPointError) as exc:
            agent.rng_state = rng.state
            raise TrainingDiverged(f"diverged at step {agent.step + 1}: {exc}", agent.step + 1,
                                   agent, evaluator.phase if evaluator else mode) from exc
        agent.step += 1
        agent.rng_state = rng.state
        if on_update:
            on_update(agent.step, report)
        if evaluator and _due(k, n_steps, eval_every):
            evaluator(agent, alpha)
    agent.rng_state = rng.state
    return agent


def init_agent(dataset_or_spec, hp: Hyperparams, seed: int) -> Agent:
    spec = dataset_or_spec if isinstance(dataset_or_spec, EnvSpec) else get_spec(dataset_or_spec.env)
    return make_agent(spec.obs_dim, spec.act_dim, spec.action_bound, hp,
                      Rng(derive_seed(seed, INIT_TAG)))


def train_offline(dataset: TransitionDataset, hp: Hyperparams, schedule: OfflineSchedule,
                  seed: int, *, stats: NormStats | None = None,
                  refs: ReferenceScores | None = None, agent: Agent | None = None,
                  alpha: float | None = None, n_steps: int | None = None,
                  phase: str = "baseline", on_update: OnUpdate | None = None,
                  ) -> tuple[Agent, RunLog]:
    """Baseline TD3-BC: ``schedule.J`` iterations of critic step + delayed actor step."""
    spec = get_spec(dataset.env)
    stats = stats if stats is not None else compute_norm_stats(dataset)
    agent = agent if agent is not None else init_agent(spec, hp, seed)
    alpha = hp.alpha if alpha is None else alpha
    n_steps = schedule.J if n_steps is None else n_steps
    ev = _Evaluator(spec, stats, refs, seed, schedule.eval_episodes, phase)
    mode = "bc" if hp.bc_only else "full"
    _offline_loop(agent, dataset, stats, hp, n_steps, alpha, ev, schedule.eval_every, mode,
                  on_update)
    ev.log.final_alpha = alpha
    return agent, ev.log


def refine_policy(agent: Agent, dataset: TransitionDataset, hp: Hyperparams,
                  schedule: OfflineSchedule, seed: int, *, stats: NormStats | None = None,
                  refs: ReferenceScores | None = None, on_update: OnUpdate | None = None,
                  ) -> tuple[Agent, RunLog]:
    """``schedule.K`` actor-only steps at alpha / lambda; critics stay frozen."""
    spec = get_spec(dataset.env)
    stats = stats if stats is not None else compute_norm_stats(dataset)
    alpha = scale_alpha(hp.alpha, schedule.lam)
    ev = _Evaluator(spec, stats, refs, seed, schedule.eval_episodes, "refined")
    _offline_loop(agent, dataset, stats, hp, schedule.K, alpha, ev, schedule.eval_every,
                  "actor", on_update)
    ev.log.final_alpha = alpha
    return agent, ev.log


def _online_loop(agent: Agent, spec: EnvSpec, hp: Hyperparams, stats: NormStats, seed: int,
                 prefill: int, n_steps: int, alpha_start: float, kappa: float,
                 capacity: int, evaluator: _Evaluator | None, eval_every: int,
                 random_prefill: bool = False, on_update: OnUpdate | None = None,
                 on_eval: Callable[[Agent, ReplayBuffer], None] | None = None,
                 ) -> tuple[Agent, ReplayBuffer, float]:
    """Prefill a fresh buffer, then act/store/update for ``n_steps`` with alpha decaying by kappa."""
    rng = Rng(agent.rng_state)
    buf = ReplayBuffer(capacity, spec.obs_dim, spec.act_dim)
    episode = 0
    env_rng = Rng(derive_seed(seed, ENV_TAG, episode))
    state, obs = reset(spec, env_rng)
    uniform = random_policy(spec, env_rng) if random_prefill else None

    def act_and_store(explore_uniform: bool):
        nonlocal state, obs, episode, env_rng, uniform
        if explore_uniform:
            a = uniform(obs)
        else:
            a = select_action(agent, obs, stats, hp.exploration_sigma, env_rng)
        res = step(state, a)
        buf.push(obs, a, res.reward, res.next_obs, res.terminal)
        obs = res.next_obs
        if res.terminal or res.timeout:
            episode += 1
            env_rng = Rng(derive_seed(seed, ENV_TAG, episode))
            state, obs = reset(spec, env_rng)
            if random_prefill:
                uniform = random_policy(spec, env_rng)

    for _ in range(prefill):
        act_and_store(random_prefill)

    alpha = alpha_start
    if evaluator and _due(0, n_steps, eval_every):
        evaluator(agent, alpha)
        if on_eval:
            on_eval(agent, buf)
    for n in range(1, n_steps + 1):
        act_and_store(False)
        batch = sample_minibatch(buf, hp.batch_size, rng, stats)
        try:
            c = critic_update(agent, batch, hp, rng)
            report = maybe_update_targets_and_actor(agent, batch, hp, alpha)
        except (DivergenceError, FloatingPointError) as exc:
            agent.rng_state = rng.state
            raise TrainingDiverged(f"diverged at step {agent.step + 1}: {exc}", agent.step + 1,
                                   agent, evaluator.phase if evaluator else "online") from exc
        report.critic_loss = c.critic_loss
        alpha = kappa * alpha
        agent.step += 1
        agent.rng_state = rng.state
        if on_update:
            on_update(agent.step, report)
        if evaluator and _due(n, n_steps, eval_every):
            evaluator(agent, alpha)
            if on_eval:
                on_eval(agent, buf)
    agent.rng_state = rng.state
    return agent, buf, alpha


def finetune_online(agent: Agent, spec: EnvSpec, hp: Hyperparams, schedule: FinetuneSchedule,
                    seed: int, *, stats: NormStats, refs: ReferenceScores | None = None,
                    on_update: OnUpdate | None = None) -> tuple[Agent, RunLog]:
    """Online fine-tuning with alpha decayed exponentially from alpha_start to alpha_end.

    Offline normalization stats stay frozen for the new observations.
    """
    kappa = decay_rate(schedule.alpha_start, schedule.alpha_end, schedule.N)
    ev = _Evaluator(spec, stats, refs, seed, schedule.eval_episodes, "finetuned")
    agent, _, alpha = _online_loop(agent, spec, hp, stats, seed, schedule.M, schedule.N,
                                   schedule.alpha_start, kappa, schedule.capacity, ev,
                                   schedule.eval_every, on_update=on_update)
    ev.log.final_alpha = alpha
    return agent, ev.log


def train_online_td3(spec: EnvSpec, hp: Hyperparams, seed: int, *, prefill: int, n_steps: int,
                     eval_every: int, eval_episodes: int = 10,
                     on_eval: Callable[[Agent, ReplayBuffer], None] | None = None,
                     ) -> tuple[Agent, ReplayBuffer, RunLog]:
    """Plain TD3 from scratch (alpha fixed at 0), uniform-random prefill.

    Used to train behaviour policies; observations are not normalized.
    """
    agent = init_agent(spec, hp, seed)
    stats = NormStats.identity(spec.obs_dim)
    ev = _Evaluator(spec, stats, None, seed, eval_episodes, "behavior")
    agent, buf, _ = _online_loop(agent, spec, hp, stats, seed, prefill, n_steps, 0.0, 1.0,
                                 prefill + n_steps, ev, eval_every, random_prefill=True,
                                 on_eval=on_eval)
    return agent, buf, ev.log


def run_ablation(mode: str, dataset: TransitionDataset, hp: Hyperparams,
                 schedule: OfflineSchedule, seed: int, *, stats: NormStats | None = None,
                 refs: ReferenceScores | None = None, on_update: OnUpdate | None = None,
                 ) -> tuple[Agent, RunLog]:
    """Refinement ablations.

    ``none``                 baseline then refinement (the method itself)
    ``low_alpha_from_start`` baseline trained with alpha / lambda throughout
    ``refine_with_critic``   refinement that also trains the critics, 2K loop steps
    ``extended_baseline``    baseline for 1.5 J steps, no refinement
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {ABLATION_MODES}")
    stats = stats if stats is not None else compute_norm_stats(dataset)
    kw = dict(stats=stats, refs=refs, on_update=on_update)
    if mode == "none":
        agent, log_ = train_offline(dataset, hp, schedule, seed, **kw)
        agent, log2 = refine_policy(agent, dataset, hp, schedule, seed, **kw)
        log_.extend(log2)
        return agent, log_
    if mode == "low_alpha_from_start":
        return train_offline(dataset, hp, schedule, seed, alpha=scale_alpha(hp.alpha, schedule.lam),
                             phase="ablation_low_alpha", **kw)
    if mode == "extended_baseline":
        return train_offline(dataset, hp, schedule, seed, n_steps=schedule.J + schedule.J // 2,
                             phase="ablation_extended", **kw)
    agent, log_ = train_offline(dataset, hp, schedule, seed, **kw)
    ev = _Evaluator(get_spec(dataset.env), stats, refs, seed, schedule.eval_episodes,
                    "ablation_refine_critic")
    alpha = scale_alpha(hp.alpha, schedule.lam)
    n_steps = schedule.K * hp.critic_to_actor_ratio
    _offline_loop(agent, dataset, stats, hp, n_steps, alpha, ev, schedule.eval_every, "full",
                  on_update)
    ev.log.final_alpha = alpha
    log_.extend(ev.log)
    return agent, log_


__all__ = [
    "ABLATION_MODES", "FinetuneSchedule", "LogRow", "OfflineSchedule", "RunLog",
    "TrainingDiverged", "decay_rate", "finetune_online", "refine_policy", "run_ablation",
    "scale_alpha", "train_offline", "train_online_td3",
]
