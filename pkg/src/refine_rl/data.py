"""Offline transition datasets, the online replay buffer, and state normalization.

Datasets hold raw float32 states; normalization happens when a minibatch is
drawn or a policy is queried.

On-disk format (little-endian): ``b"OFRLDS01"``, u32 obs_dim, u32 act_dim,
u64 count, then ``count`` packed records
``[obs f32 * obs_dim | act f32 * act_dim | reward f32 | next_obs f32 * obs_dim | terminal u8]``.
A sidecar ``<basename>.meta`` carries ``key=value`` lines (env, level, seed,
generator parameters).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from refine_rl.rng import Rng

LEVELS = ("expert", "medium", "medium_replay", "medium_expert")
MAGIC = b"OFRLDS01"
EPS_NORM = 1e-3


class DatasetError(ValueError):
    pass


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


@dataclass
class TransitionDataset:
    """Immutable-by-convention offline dataset D; arrays are float32."""

    env: str
    level: str
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.level not in LEVELS:
            raise DatasetError(f"unknown dataset level {self.level!r}")
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32).reshape(-1)
        self.next_obs = np.asarray(self.next_obs, dtype=np.float32)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(-1)
        n = len(self.rewards)
        if n == 0:
            raise DatasetError("a dataset needs at least one transition")
        if self.obs.ndim != 2 or self.actions.ndim != 2:
            raise DatasetError("obs and actions must be 2-D arrays")
        if (self.obs.shape != self.next_obs.shape or len(self.obs) != n
                or len(self.actions) != n or len(self.terminals) != n):
            raise DatasetError("transition arrays have inconsistent shapes")
        if not np.all(np.isfinite(self.rewards)):
            raise DatasetError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def size(self) -> int:
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def equals(self, other: "TransitionDataset") -> bool:
        """Bitwise equality of transitions and metadata."""
        return (self.env == other.env and self.level == other.level
                and self.metadata == other.metadata
                and all(np.array_equal(x, y) for x, y in zip(self._arrays(), other._arrays())))

    def _arrays(self):
        return self.obs, self.actions, self.rewards, self.next_obs, self.terminals


def concatenate(first: TransitionDataset, second: TransitionDataset, level: str,
                metadata: dict[str, str] | None = None) -> TransitionDataset:
    """``first ++ second``, order preserved."""
    if first.env != second.env or first.obs_dim != second.obs_dim or first.act_dim != second.act_dim:
        raise DatasetError("cannot concatenate datasets from different environments")
    return TransitionDataset(
        first.env, level,
        np.concatenate([first.obs, second.obs]),
        np.concatenate([first.actions, second.actions]),
        np.concatenate([first.rewards, second.rewards]),
        np.concatenate([first.next_obs, second.next_obs]),
        np.concatenate([first.terminals, second.terminals]),
        dict(metadata or {}),
    )


class ReplayBuffer:
    """Fixed-capacity ring buffer; overwrites the oldest transition when full."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.write_head = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action, reward: float, next_obs, terminal: bool) -> None:
        i = self.write_head
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.terminals[i] = terminal
        self.write_head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def to_dataset(self, env: str, level: str, n: int | None = None,
                   metadata: dict[str, str] | None = None) -> TransitionDataset:
        """The first ``n`` stored slots (all of them by default) as a float32 dataset."""
        n = self.size if n is None else n
        if n > self.size:
            raise DatasetError(f"buffer holds {self.size} transitions, asked for {n}")
        return TransitionDataset(env, level, self.obs[:n], self.actions[:n], self.rewards[:n],
                                 self.next_obs[:n], self.terminals[:n], dict(metadata or {}))


@dataclass
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = EPS_NORM

    @classmethod
    def identity(cls, obs_dim: int) -> "NormStats":
        """Stats whose transform divides by exactly 1 and subtracts 0."""
        return cls(np.zeros(obs_dim), np.full(obs_dim, 1.0 - EPS_NORM))

    def normalize(self, s: np.ndarray) -> np.ndarray:
        return (np.asarray(s, dtype=np.float64) - self.mu) / (self.sigma + self.eps)


def compute_norm_stats(dataset: TransitionDataset) -> NormStats:
    """Per-dimension mean and population std of the dataset states (not next states)."""
    s = dataset.obs.astype(np.float64)
    return NormStats(s.mean(axis=0), s.std(axis=0))


def normalize_state(stats: NormStats, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != stats.mu.shape[0]:
        raise DatasetError(f"state dim {s.shape[-1]} != stats dim {stats.mu.shape[0]}")
    return stats.normalize(s)


def sample_minibatch(source: TransitionDataset | ReplayBuffer, batch_size: int, rng: Rng,
                     stats: NormStats | None = None) -> Batch:
    """Uniform sampling with replacement; states normalized with ``stats`` when given."""
    n = source.size
    if n == 0:
        raise DatasetError("cannot sample from an empty source")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(n, batch_size)
    s = source.obs[idx].astype(np.float64)
    s_next = source.next_obs[idx].astype(np.float64)
    if stats is not None:
        s = stats.normalize(s)
        s_next = stats.normalize(s_next)
    return Batch(s, source.actions[idx].astype(np.float64),
                 source.rewards[idx].astype(np.float64), s_next,
                 source.terminals[idx].astype(np.float64))


def _record_dtype(obs_dim: int, act_dim: int) -> np.dtype:
    return np.dtype([
        ("obs", "<f4", (obs_dim,)), ("act", "<f4", (act_dim,)), ("rew", "<f4"),
        ("next", "<f4", (obs_dim,)), ("term", "u1"),
    ])


def meta_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".meta")


def write_meta(path: str | Path, items: dict[str, str]) -> None:
    lines = []
    for k, v in items.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise DatasetError(f"metadata entry {k!r} cannot be written as key=value")
        lines.append(f"{k}={v}\n")
    Path(path).write_text("".join(lines))


def read_meta(path: str | Path) -> dict[str, str]:
    items = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        items[k] = v
    return items


def save_dataset(dataset: TransitionDataset, path: str | Path) -> None:
    path = Path(path)
    rec = np.empty(dataset.size, dtype=_record_dtype(dataset.obs_dim, dataset.act_dim))
    rec["obs"] = dataset.obs
    rec["act"] = dataset.actions
    rec["rew"] = dataset.rewards
    rec["next"] = dataset.next_obs
    rec["term"] = dataset.terminals
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIQ", dataset.obs_dim, dataset.act_dim, dataset.size))
        f.write(rec.tobytes())
    meta = {"env": dataset.env, "level": dataset.level}
    meta.update((k, v) for k, v in dataset.metadata.items() if k not in meta)
    write_meta(meta_path(path), meta)


def load_dataset(path: str | Path) -> TransitionDataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file (bad magic)")
    obs_dim, act_dim, count = struct.unpack_from("<IIQ", raw, 8)
    dt = _record_dtype(obs_dim, act_dim)
    body = raw[24:]
    if len(body) != count * dt.itemsize:
        raise DatasetError(f"{path}: expected {count} records, file size disagrees")
    rec = np.frombuffer(body, dtype=dt)
    meta = read_meta(meta_path(path))
    env = meta.pop("env", "")
    level = meta.pop("level", "")
    return TransitionDataset(env, level, rec["obs"].copy(), rec["act"].copy(), rec["rew"].copy(),
                             rec["next"].copy(), rec["term"].astype(bool), meta)
