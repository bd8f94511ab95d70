"""TD3 with a behavioural-cloning penalty on the actor (TD3-BC).

Critic target::

    y = r + gamma * (1 - terminal) * min(Q'_1(s', a'), Q'_2(s', a'))
    a' = clip(pi'(s') + clip(noise, -c, c), -bound, bound)

Actor objective, maximized::

    mean_B[ Q_1(s, pi(s)) / mean_B|Q_1(s, pi(s))| ] - alpha * mean_B mean_j (pi(s)_j - a_j)^2

with the normalizer held constant when differentiating.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields

import numpy as np

from refine_rl.data import Batch, NormStats
from refine_rl.nn import (
    TANH, AdamState, Mlp, actor_forward, adam_step, backward, critic_forward, init_mlp,
    polyak_update,
)
from refine_rl.rng import Rng

Q_NORM_FLOOR = 1e-8


class DivergenceError(FloatingPointError):
    """A loss or target went non-finite."""


@dataclass
class Hyperparams:
    gamma: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    critic_to_actor_ratio: int = 2
    alpha: float = 0.4
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    exploration_sigma: float = 0.1
    hidden: int = 256
    # drop the Q term from the actor objective (plain behavioural cloning)
    bc_only: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.critic_to_actor_ratio < 1:
            raise ValueError("critic_to_actor_ratio must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1 or self.hidden < 1:
            raise ValueError("batch_size and hidden must be positive")


@dataclass
class UpdateReport:
    critic_loss: float = 0.0
    actor_objective: float = 0.0
    mean_abs_q: float = 0.0
    bc_mse: float = 0.0
    alpha_used: float = 0.0
    actor_updated: bool = False


@dataclass
class Agent:
    critic1: Mlp
    critic2: Mlp
    actor: Mlp
    target_critic1: Mlp
    target_critic2: Mlp
    target_actor: Mlp
    critic1_opt: AdamState
    critic2_opt: AdamState
    actor_opt: AdamState
    update_counter: int = 0
    critic_updates: int = 0
    actor_updates: int = 0
    target_syncs: int = 0
    # loop iterations across all phases, and the run's single random stream
    step: int = 0
    rng_state: int = 0

    NETWORKS = ("critic1", "critic2", "actor", "target_critic1", "target_critic2", "target_actor")
    OPTIMIZERS = ("critic1_opt", "critic2_opt", "actor_opt")

    @property
    def obs_dim(self) -> int:
        return self.actor.dims[0]

    @property
    def act_dim(self) -> int:
        return self.actor.dims[-1]

    @property
    def bound(self) -> float:
        return self.actor.bound

    def networks(self) -> list[Mlp]:
        return [getattr(self, n) for n in self.NETWORKS]

    def copy(self) -> "Agent":
        return copy.deepcopy(self)


def make_agent(obs_dim: int, act_dim: int, action_bound: float, hp: Hyperparams,
               rng: Rng) -> Agent:
    """Fresh agent; critic1, critic2, actor are initialized in that order from ``rng``."""
    h = hp.hidden
    c1 = init_mlp((obs_dim + act_dim, h, h, 1), rng)
    c2 = init_mlp((obs_dim + act_dim, h, h, 1), rng)
    pi = init_mlp((obs_dim, h, h, act_dim), rng, output=TANH, bound=action_bound)
    return Agent(
        c1, c2, pi, c1.copy(), c2.copy(), pi.copy(),
        AdamState.for_params(c1, hp.critic_lr),
        AdamState.for_params(c2, hp.critic_lr),
        AdamState.for_params(pi, hp.actor_lr),
        rng_state=rng.state,
    )


def target_action(agent: Agent, s_next: np.ndarray, rng: Rng, hp: Hyperparams) -> np.ndarray:
    """Smoothed target-policy action for the Bellman target."""
    bound = agent.bound
    a, _ = actor_forward(agent.target_actor, s_next)
    noise = rng.normal(a.size, scale=hp.policy_noise * bound).reshape(a.shape)
    clip = hp.noise_clip * bound
    noise = np.clip(noise, -clip, clip)
    return np.clip(a + noise, -bound, bound)


def bellman_target(agent: Agent, batch: Batch, rng: Rng, hp: Hyperparams) -> np.ndarray:
    a_next = target_action(agent, batch.s_next, rng, hp)
    q1, _ = critic_forward(agent.target_critic1, batch.s_next, a_next)
    q2, _ = critic_forward(agent.target_critic2, batch.s_next, a_next)
    y = batch.r + hp.gamma * (1.0 - batch.terminal) * np.minimum(q1, q2)
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite Bellman target; the critics have diverged")
    return y


def critic_loss_and_grad(critic: Mlp, batch: Batch, y: np.ndarray) -> tuple[float, Mlp]:
    """``mean_B (Q(s, a) - y)^2`` and its gradient; ``y`` is a constant."""
    q, cache = critic_forward(critic, batch.s, batch.a)
    diff = q - y
    loss = float(np.mean(diff * diff))
    grads, _ = backward(critic, cache, 2.0 * diff / len(diff))
    return loss, grads


def critic_update(agent: Agent, batch: Batch, hp: Hyperparams, rng: Rng) -> UpdateReport:
    """One descent step on both critics towards the shared twin-min target."""
    y = bellman_target(agent, batch, rng, hp)
    loss1, g1 = critic_loss_and_grad(agent.critic1, batch, y)
    loss2, g2 = critic_loss_and_grad(agent.critic2, batch, y)
    if not (np.isfinite(loss1) and np.isfinite(loss2)):
        raise DivergenceError("non-finite critic loss")
    agent.critic1, agent.critic1_opt = adam_step(agent.critic1, agent.critic1_opt, g1)
    agent.critic2, agent.critic2_opt = adam_step(agent.critic2, agent.critic2_opt, g2)
    agent.critic_updates += 1
    return UpdateReport(critic_loss=loss1 + loss2)


def normalize_q(q: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide by the batch mean of ``|q|``; a near-zero mean leaves ``q`` as is."""
    q = np.asarray(q, dtype=np.float64)
    if q.size == 0:
        raise ValueError("normalize_q needs a non-empty batch")
    mean_abs = float(np.mean(np.abs(q)))
    denom = mean_abs if mean_abs >= Q_NORM_FLOOR else 1.0
    return q / denom, mean_abs


def actor_objective_and_grad(actor: Mlp, critic: Mlp, batch: Batch, alpha: float,
                             use_q: bool = True) -> tuple[float, Mlp, dict]:
    """Actor objective (to maximize) and its gradient wrt the actor params."""
    n = len(batch)
    pi, cache_pi = actor_forward(actor, batch.s)
    diff = pi - batch.a
    bc = float(np.mean(diff * diff))
    d_pi = -alpha * 2.0 * diff / diff.size
    mean_abs = 0.0
    if use_q:
        q, cache_q = critic_forward(critic, batch.s, pi)
        q_norm, mean_abs = normalize_q(q)
        denom = mean_abs if mean_abs >= Q_NORM_FLOOR else 1.0
        _, d_in = backward(critic, cache_q, np.full(n, 1.0 / (denom * n)), param_grads=False)
        d_pi = d_pi + d_in[:, actor.dims[0]:]
        objective = float(np.mean(q_norm)) - alpha * bc
    else:
        objective = -alpha * bc
    grads, _ = backward(actor, cache_pi, d_pi)
    return objective, grads, {"mean_abs_q": mean_abs, "bc_mse": bc}


def actor_update(agent: Agent, batch: Batch, hp: Hyperparams, alpha: float) -> UpdateReport:
    """One ascent step on the actor; critics and all targets are left alone."""
    objective, grads, info = actor_objective_and_grad(agent.actor, agent.critic1, batch, alpha,
                                                      use_q=not hp.bc_only)
    if not np.isfinite(objective):
        raise DivergenceError("non-finite actor objective")
    agent.actor, agent.actor_opt = adam_step(agent.actor, agent.actor_opt, grads, "ascent")
    agent.actor_updates += 1
    return UpdateReport(actor_objective=objective, mean_abs_q=info["mean_abs_q"],
                        bc_mse=info["bc_mse"], alpha_used=alpha, actor_updated=True)


def update_targets(agent: Agent, tau: float, critics: bool = True) -> None:
    agent.target_actor = polyak_update(agent.target_actor, agent.actor, tau)
    if critics:
        agent.target_critic1 = polyak_update(agent.target_critic1, agent.critic1, tau)
        agent.target_critic2 = polyak_update(agent.target_critic2, agent.critic2, tau)


def maybe_update_targets_and_actor(agent: Agent, batch: Batch, hp: Hyperparams,
                                   alpha: float) -> UpdateReport:
    """Delayed policy update: actor step plus target sync on every ratio-th call."""
    agent.update_counter += 1
    if agent.update_counter % hp.critic_to_actor_ratio:
        return UpdateReport(alpha_used=alpha)
    report = actor_update(agent, batch, hp, alpha)
    update_targets(agent, hp.tau)
    agent.target_syncs += 1
    return report


def select_action(agent: Agent, s_raw, stats: NormStats, exploration_sigma: float = 0.0,
                  rng: Rng | None = None) -> np.ndarray:
    """Policy action for a raw observation, plus N(0, (sigma * bound)^2) noise when sigma > 0."""
    s = stats.normalize(np.asarray(s_raw, dtype=np.float64).reshape(1, -1))
    a, _ = actor_forward(agent.actor, s)
    a = a[0]
    if exploration_sigma > 0:
        if rng is None:
            raise ValueError("exploration noise needs an rng")
        a = a + rng.normal(agent.act_dim, scale=exploration_sigma * agent.bound)
    return np.clip(a, -agent.bound, agent.bound)


def policy_fn(agent: Agent, stats: NormStats):
    """Deterministic ``obs -> action`` closure over a snapshot of the actor."""
    actor = agent.actor.copy()
    bound = agent.bound

    def act(obs):
        a, _ = actor_forward(actor, stats.normalize(np.asarray(obs).reshape(1, -1)))
        return np.clip(a[0], -bound, bound)
    return act


def hyperparam_names() -> list[str]:
    return [f.name for f in fields(Hyperparams)]
