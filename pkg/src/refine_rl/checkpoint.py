"""Binary agent checkpoints.

Layout (little-endian)::

    b"TD3BCKP1"  u32 version
    str env      str phase                       (str = u16 byte length + utf-8)
    u32 obs_dim  u32 act_dim  u32 hidden  f64 action_bound
    f64 mu[obs_dim]  f64 sigma[obs_dim]  f64 eps_norm
    f64 alpha  u64 step  i64 seed  u64 rng_state
    u64 update_counter  u64 critic_updates  u64 actor_updates  u64 target_syncs
    6 networks  critic1, critic2, actor, target_critic1, target_critic2, target_actor;
                per layer: weights row-major (fan_in x fan_out) then biases, f32
    3 optimizers critic1, critic2, actor: u64 step_count, f64 lr, beta1, beta2, eps,
                then first moments and second moments in network order, f64

Network weights are rounded to float32; optimizer moments and normalization
statistics are kept at float64 so a resumed phase continues exactly.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from refine_rl.agent import Agent
from refine_rl.data import NormStats
from refine_rl.nn import IDENTITY, TANH, AdamState, Mlp

MAGIC = b"TD3BCKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    env: str
    phase: str
    agent: Agent
    stats: NormStats
    alpha: float
    seed: int


def _write_str(f, s: str) -> None:
    b = s.encode()
    f.write(struct.pack("<H", len(b)))
    f.write(b)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode()


def _read(f, fmt: str):
    size = struct.calcsize(fmt)
    buf = f.read(size)
    if len(buf) != size:
        raise CheckpointError("checkpoint truncated")
    return struct.unpack(fmt, buf)


def _read_array(f, dtype: str, shape) -> np.ndarray:
    n = int(np.prod(shape))
    itemsize = np.dtype(dtype).itemsize
    buf = f.read(n * itemsize)
    if len(buf) != n * itemsize:
        raise CheckpointError("checkpoint truncated")
    return np.frombuffer(buf, dtype=dtype).astype(np.float64).reshape(shape)


def network_bytes(net: Mlp) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in net.blocks())


def network_digest(agent: Agent, names=Agent.NETWORKS) -> str:
    """SHA-256 over the exact float64 parameters of the named networks."""
    h = hashlib.sha256()
    for name in names:
        for a in getattr(agent, name).blocks():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def _net_shapes(dims):
    return [((i, o), (o,)) for i, o in zip(dims[:-1], dims[1:])]


def _read_net(f, dims, output: str, bound: float) -> Mlp:
    ws, bs = [], []
    for wshape, bshape in _net_shapes(dims):
        ws.append(_read_array(f, "<f4", wshape))
        bs.append(_read_array(f, "<f4", bshape))
    return Mlp(ws, bs, output, bound)


def dumps(ck: Checkpoint) -> bytes:
    agent, stats = ck.agent, ck.stats
    obs_dim, act_dim = agent.obs_dim, agent.act_dim
    hidden = agent.actor.dims[1]
    if stats.mu.shape != (obs_dim,):
        raise CheckpointError("norm stats do not match the agent's observation size")
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    _write_str(f, ck.env)
    _write_str(f, ck.phase)
    f.write(struct.pack("<IIId", obs_dim, act_dim, hidden, agent.bound))
    f.write(np.ascontiguousarray(stats.mu, dtype="<f8").tobytes())
    f.write(np.ascontiguousarray(stats.sigma, dtype="<f8").tobytes())
    f.write(struct.pack("<d", stats.eps))
    f.write(struct.pack("<dQqQ", ck.alpha, agent.step, ck.seed, agent.rng_state))
    f.write(struct.pack("<QQQQ", agent.update_counter, agent.critic_updates,
                        agent.actor_updates, agent.target_syncs))
    for net in agent.networks():
        f.write(network_bytes(net))
    for name in Agent.OPTIMIZERS:
        opt: AdamState = getattr(agent, name)
        f.write(struct.pack("<Qdddd", opt.step_count, opt.lr, opt.beta1, opt.beta2, opt.eps))
        for moments in (opt.m, opt.v):
            for a in moments.blocks():
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return f.getvalue()


def loads(raw: bytes) -> Checkpoint:
    f = io.BytesIO(raw)
    if f.read(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = _read(f, "<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    env = _read_str(f)
    phase = _read_str(f)
    obs_dim, act_dim, hidden, bound = _read(f, "<IIId")
    mu = _read_array(f, "<f8", (obs_dim,))
    sigma = _read_array(f, "<f8", (obs_dim,))
    (eps,) = _read(f, "<d")
    alpha, step, seed, rng_state = _read(f, "<dQqQ")
    counters = _read(f, "<QQQQ")
    critic_dims = (obs_dim + act_dim, hidden, hidden, 1)
    actor_dims = (obs_dim, hidden, hidden, act_dim)
    nets = {}
    for name in Agent.NETWORKS:
        if "critic" in name:
            nets[name] = _read_net(f, critic_dims, IDENTITY, 1.0)
        else:
            nets[name] = _read_net(f, actor_dims, TANH, bound)
    opts = {}
    for name in Agent.OPTIMIZERS:
        like = nets[name[:-4]]
        step_count, lr, b1, b2, adam_eps = _read(f, "<Qdddd")
        moments = []
        for _ in range(2):
            arrs = [_read_array(f, "<f8", a.shape) for a in like.blocks()]
            moments.append(Mlp(arrs[0::2], arrs[1::2], like.output, like.bound))
        opts[name] = AdamState(moments[0], moments[1], lr, b1, b2, adam_eps, step_count)
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    agent = Agent(**nets, **opts, update_counter=counters[0], critic_updates=counters[1],
                  actor_updates=counters[2], target_syncs=counters[3], step=step,
                  rng_state=rng_state)
    return Checkpoint(env, phase, agent, NormStats(mu, sigma, eps), alpha, seed)


def expected_size(env: str, phase: str, obs_dim: int, act_dim: int, hidden: int) -> int:
    """Byte length of a checkpoint with these dimensions."""
    def n_params(dims):
        return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    pc = n_params((obs_dim + act_dim, hidden, hidden, 1))
    pa = n_params((obs_dim, hidden, hidden, act_dim))
    header = 8 + 4 + 2 + len(env.encode()) + 2 + len(phase.encode()) + 20
    header += 16 * obs_dim + 8 + 32 + 32
    nets = 4 * (4 * pc + 2 * pa)
    opts = 3 * 40 + 16 * (2 * pc + pa)
    return header + nets + opts


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
