"""Seeded continuous-control environments and their reference scores.

Two small tasks stand in for the MuJoCo suite:

``pendulum``
    Classic torque-limited swing-up. State (theta, theta_dot) with theta = 0
    upright; obs = (cos theta, sin theta, theta_dot); reward on the pre-step
    state, never terminal, 200-step horizon.
``pointmass``
    2-D double integrator driven to the goal (0.7, 0.7). State (p, v);
    obs = (p, v, goal - p); reward and termination on the post-step position.

Both integrate with semi-implicit Euler (velocity first). All randomness comes
from the episode's :class:`~refine_rl.rng.Rng`, so ``(seed, actions)`` fixes a
trajectory bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from refine_rl.rng import Rng, derive_seed

Policy = Callable[[np.ndarray], np.ndarray]


class EnvError(RuntimeError):
    """Misuse of an environment (unknown name, stepping a finished episode)."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    action_bound: float
    horizon: int
    dt: float


PENDULUM = EnvSpec("pendulum", obs_dim=3, act_dim=1, action_bound=2.0, horizon=200, dt=0.05)
POINTMASS = EnvSpec("pointmass", obs_dim=6, act_dim=2, action_bound=1.0, horizon=200, dt=0.05)
REGISTRY = {s.name: s for s in (PENDULUM, POINTMASS)}

# pendulum constants
GRAVITY = 10.0
MASS = 1.0
LENGTH = 1.0
MAX_SPEED = 8.0

# pointmass constants
GOAL = np.array([0.7, 0.7])
GOAL_RADIUS = 0.05
MAX_VEL = 1.0
INIT_RANGE = 0.1


def get_spec(name: str) -> EnvSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise EnvError(f"unknown environment {name!r}; known: {sorted(REGISTRY)}") from None


@dataclass
class EnvState:
    spec: EnvSpec
    x: np.ndarray
    rng: Rng
    elapsed_steps: int = 0
    done: bool = False


@dataclass
class StepResult:
    next_obs: np.ndarray
    reward: float
    terminal: bool
    timeout: bool


def wrap_angle(theta: float) -> float:
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


def observe(state: EnvState) -> np.ndarray:
    x = state.x
    if state.spec.name == "pendulum":
        return np.array([math.cos(x[0]), math.sin(x[0]), x[1]])
    p = x[:2]
    return np.concatenate([p, x[2:], GOAL - p])


def reset(spec: EnvSpec, seed: int | Rng) -> tuple[EnvState, np.ndarray]:
    """Fresh episode. ``seed`` may be an int or an already-seeded :class:`Rng`."""
    spec = get_spec(spec.name)
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    if spec.name == "pendulum":
        theta = rng.uniform(-math.pi, math.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        x = np.array([theta, theta_dot])
    else:
        p = rng.uniform(-INIT_RANGE, INIT_RANGE, 2)
        x = np.concatenate([p, np.zeros(2)])
    state = EnvState(spec, x, rng)
    return state, observe(state)


def _pendulum_step(x: np.ndarray, u: float, dt: float) -> tuple[np.ndarray, float]:
    theta, theta_dot = float(x[0]), float(x[1])
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2)
    theta_acc = 3.0 * GRAVITY / (2.0 * LENGTH) * math.sin(theta) + 3.0 / (MASS * LENGTH**2) * u
    theta_dot = min(max(theta_dot + theta_acc * dt, -MAX_SPEED), MAX_SPEED)
    theta = theta + theta_dot * dt
    return np.array([theta, theta_dot]), reward


def _pointmass_step(x: np.ndarray, a: np.ndarray, dt: float) -> tuple[np.ndarray, float, bool]:
    v = np.clip(x[2:] + a * dt, -MAX_VEL, MAX_VEL)
    p = x[:2] + v * dt
    dist = float(np.linalg.norm(p - GOAL))
    reward = -dist - 0.01 * float(a @ a)
    return np.concatenate([p, v]), reward, dist < GOAL_RADIUS


def step(state: EnvState, action) -> StepResult:
    """Advance one step in place. Actions are clipped to the action bound."""
    if state.done:
        raise EnvError("episode is over; call reset() before stepping again")
    spec = state.spec
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(spec.act_dim),
                -spec.action_bound, spec.action_bound)
    if spec.name == "pendulum":
        state.x, reward = _pendulum_step(state.x, float(a[0]), spec.dt)
        terminal = False
    else:
        state.x, reward, terminal = _pointmass_step(state.x, a, spec.dt)
    state.elapsed_steps += 1
    # a terminal on the last step stays terminal so the bootstrap is masked
    timeout = not terminal and state.elapsed_steps == spec.horizon
    state.done = terminal or timeout
    return StepResult(observe(state), reward, terminal, timeout)


def reward_bounds(spec: EnvSpec) -> tuple[float, float]:
    """Closed interval that every per-step reward of ``spec`` lies in."""
    if spec.name == "pendulum":
        return -(math.pi**2 + 0.1 * MAX_SPEED**2 + 0.001 * spec.action_bound**2), 0.0
    # start within INIT_RANGE of the origin, speed at most MAX_VEL per axis
    start = float(np.linalg.norm(GOAL + INIT_RANGE))
    travel = spec.horizon * spec.dt * MAX_VEL * math.sqrt(2.0)
    return -(start + travel + 0.01 * spec.act_dim * spec.action_bound**2), 0.0


@dataclass
class Episode:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    timeouts: np.ndarray
    ret: float = field(init=False)

    def __post_init__(self):
        self.ret = float(np.sum(self.rewards))

    def __len__(self) -> int:
        return len(self.rewards)


def run_episode(spec: EnvSpec, policy: Policy, rng: Rng, exploration_sigma: float = 0.0,
                max_steps: int | None = None) -> Episode:
    """One episode driven by ``policy``; exploration noise comes from ``rng``.

    Gaussian exploration noise has standard deviation
    ``exploration_sigma * action_bound`` and actions are clipped after it.
    """
    state, obs = reset(spec, rng)
    bound = spec.action_bound
    rows = []
    while not state.done and (max_steps is None or len(rows) < max_steps):
        a = np.asarray(policy(obs), dtype=np.float64).reshape(spec.act_dim)
        if exploration_sigma > 0:
            a = a + rng.normal(spec.act_dim, scale=exploration_sigma * bound)
        a = np.clip(a, -bound, bound)
        res = step(state, a)
        rows.append((obs, a, res.reward, res.next_obs, res.terminal, res.timeout))
        obs = res.next_obs
    o, a, r, o2, term, tout = zip(*rows)
    return Episode(np.array(o), np.array(a), np.array(r), np.array(o2),
                   np.array(term), np.array(tout))


def rollout(spec: EnvSpec, policy: Policy, seed: int, episodes: int,
            exploration_sigma: float = 0.0) -> list[Episode]:
    """``episodes`` episodes; episode ``i`` runs on ``Rng(derive_seed(seed, i))``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if exploration_sigma < 0:
        raise ValueError("exploration_sigma must be >= 0")
    return [run_episode(spec, policy, Rng(derive_seed(seed, i)), exploration_sigma)
            for i in range(episodes)]


def random_policy(spec: EnvSpec, rng: Rng) -> Policy:
    """Uniform actions over the action box, drawn from ``rng``."""
    def act(_obs):
        return rng.uniform(-spec.action_bound, spec.action_bound, spec.act_dim)
    return act


@dataclass(frozen=True)
class ReferenceScores:
    env: str
    random_return: float
    expert_return: float

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise ValueError(
                f"expert return {self.expert_return} does not exceed "
                f"random return {self.random_return} on {self.env}")


# stream tags for derive_seed
_REF_EPISODES_TAG = 0x5EF
_REF_RANDOM_TAG = 0x2A7D


def compute_reference_scores(spec: EnvSpec, expert_policy: Policy, seed: int,
                             episodes: int = 100) -> ReferenceScores:
    """Mean returns of a uniform-random policy and the deterministic expert.

    Both policies face the same ``episodes`` initial states.
    """
    ep_seed = derive_seed(seed, _REF_EPISODES_TAG)
    rand = random_policy(spec, Rng(derive_seed(seed, _REF_RANDOM_TAG)))
    random_return = float(np.mean([e.ret for e in rollout(spec, rand, ep_seed, episodes)]))
    expert_return = float(np.mean([e.ret for e in rollout(spec, expert_policy, ep_seed, episodes)]))
    if not expert_return > random_return:
        raise EnvError(
            f"{spec.name}: expert return {expert_return:.3f} <= random return "
            f"{random_return:.3f}; the expert policy or environment is misconfigured")
    return ReferenceScores(spec.name, random_return, expert_return)
