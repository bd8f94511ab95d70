"""Two-hidden-layer MLPs with hand-written backprop, Adam and Polyak averaging.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``x @ W + b`` on a batch of row vectors. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from refine_rl.rng import Rng

TANH = "tanh"
IDENTITY = "identity"


class ShapeError(ValueError):
    """Raised when arrays handed to a network do not match its layer dims."""


@dataclass
class Mlp:
    """input -> hidden -> hidden -> output, ReLU hidden activations.

    ``output`` is ``"tanh"`` (outputs ``bound * tanh(z)``) or ``"identity"``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = IDENTITY
    bound: float = 1.0

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ShapeError("an Mlp has exactly two hidden layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} input {w.shape[0]} does not chain")
        if self.output not in (TANH, IDENTITY):
            raise ValueError(f"unknown output activation {self.output!r}")
        if self.output == TANH and not self.bound > 0:
            raise ValueError("tanh output needs a positive bound")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.blocks())

    def blocks(self) -> Iterator[np.ndarray]:
        """Parameter arrays in serialization order: W0, b0, W1, b1, W2, b2."""
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.output, self.bound)

    def zeros_like(self) -> "Mlp":
        return Mlp([np.zeros_like(w) for w in self.weights],
                   [np.zeros_like(b) for b in self.biases], self.output, self.bound)


def init_mlp(dims, rng: Rng, output: str = IDENTITY, bound: float = 1.0) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.

    Draw order is layer by layer, weights row-major then biases.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ShapeError(f"expected (input, hidden, hidden, output), got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-lim, lim, fan_in * fan_out).reshape(fan_in, fan_out))
        biases.append(rng.uniform(-lim, lim, fan_out))
    return Mlp(weights, biases, output, bound)


@dataclass
class Cache:
    """Activations saved by :func:`forward` for :func:`backward`."""

    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    t: np.ndarray | None  # tanh(z3), tanh heads only


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Batch forward pass. ``x`` is (batch, input_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.weights[0].shape[0]:
        raise ShapeError(f"input shape {x.shape} does not match input dim {net.dims[0]}")
    w0, w1, w2 = net.weights
    b0, b1, b2 = net.biases
    z1 = x @ w0 + b0
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ w1 + b1
    h2 = np.maximum(z2, 0.0)
    z3 = h2 @ w2 + b2
    if net.output == TANH:
        t = np.tanh(z3)
        return net.bound * t, Cache(x, z1, h1, z2, h2, t)
    return z3, Cache(x, z1, h1, z2, h2, None)


def backward(net: Mlp, cache: Cache | None, dout: np.ndarray,
             param_grads: bool = True) -> tuple[Mlp | None, np.ndarray]:
    """Backprop ``dout = dL/d(output)`` through the cached forward pass.

    Returns ``(grads, dx)`` where ``grads`` is an :class:`Mlp`-shaped bundle of
    ``dL/dparams`` (None when ``param_grads`` is False) and ``dx = dL/dx``.
    """
    if cache is None:
        raise ValueError("backward needs the cache from a forward pass")
    dout = np.asarray(dout, dtype=np.float64)
    if dout.ndim == 1:
        dout = dout[:, None]
    if dout.shape != (cache.x.shape[0], net.dims[-1]):
        raise ShapeError(f"output gradient {dout.shape} does not match forward batch")
    w0, w1, w2 = net.weights
    if cache.t is not None:
        dz3 = dout * (net.bound * (1.0 - cache.t * cache.t))
    else:
        dz3 = dout
    dh2 = dz3 @ w2.T
    dz2 = dh2 * (cache.z2 > 0)
    dh1 = dz2 @ w1.T
    dz1 = dh1 * (cache.z1 > 0)
    dx = dz1 @ w0.T
    if not param_grads:
        return None, dx
    grads = Mlp(
        [cache.x.T @ dz1, cache.h1.T @ dz2, cache.h2.T @ dz3],
        [dz1.sum(axis=0), dz2.sum(axis=0), dz3.sum(axis=0)],
        net.output, net.bound,
    )
    return grads, dx


def actor_forward(net: Mlp, states: np.ndarray) -> tuple[np.ndarray, Cache]:
    if net.output != TANH:
        raise ShapeError("actor networks need a tanh output head")
    return forward(net, states)


def critic_forward(net: Mlp, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Q-values, shape (batch,), for state-action pairs."""
    if net.output != IDENTITY or net.dims[-1] != 1:
        raise ShapeError("critic networks need a scalar identity head")
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.ndim != 2 or actions.ndim != 2 or states.shape[0] != actions.shape[0]:
        raise ShapeError(f"states {states.shape} and actions {actions.shape} do not pair up")
    q, cache = forward(net, np.concatenate([states, actions], axis=1))
    return q[:, 0], cache


@dataclass
class AdamState:
    m: Mlp
    v: Mlp
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, net: Mlp, lr: float = 3e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(net.zeros_like(), net.zeros_like(), lr, beta1, beta2, eps, 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.lr, self.beta1, self.beta2,
                         self.eps, self.step_count)


_BLOCK_NAMES = ("W0", "b0", "W1", "b1", "W2", "b2")


def adam_step(net: Mlp, state: AdamState, grads: Mlp,
              direction: str = "descent") -> tuple[Mlp, AdamState]:
    """One bias-corrected Adam update; ``direction="ascent"`` maximizes."""
    if direction not in ("descent", "ascent"):
        raise ValueError(f"direction must be 'descent' or 'ascent', got {direction!r}")
    for name, g, p in zip(_BLOCK_NAMES, grads.blocks(), net.blocks()):
        if g.shape != p.shape:
            raise ShapeError(f"gradient block {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in block {name}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    sign = -1.0 if direction == "ascent" else 1.0
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(net.blocks(), grads.blocks(), state.m.blocks(), state.v.blocks()):
        g = sign * g
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)

    def pack(arrs, like):
        return Mlp(arrs[0::2], arrs[1::2], like.output, like.bound)

    new_state = AdamState(pack(new_m, state.m), pack(new_v, state.v), state.lr,
                          b1, b2, state.eps, t)
    return pack(new_p, net), new_state


def polyak_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """Return ``tau * online + (1 - tau) * target`` blockwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.dims != online.dims:
        raise ShapeError(f"target dims {target.dims} != online dims {online.dims}")
    if tau == 1.0:
        return online.copy()
    if tau == 0.0:
        return target.copy()
    arrs = [tau * o + (1.0 - tau) * t for t, o in zip(target.blocks(), online.blocks())]
    return Mlp(arrs[0::2], arrs[1::2], target.output, target.bound)


def flatten(net: Mlp) -> np.ndarray:
    return np.concatenate([a.ravel() for a in net.blocks()])


def unflatten(flat: np.ndarray, like: Mlp) -> Mlp:
    arrs, i = [], 0
    for a in like.blocks():
        arrs.append(np.asarray(flat[i:i + a.size], dtype=np.float64).reshape(a.shape))
        i += a.size
    if i != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, network has {i}")
    return Mlp(arrs[0::2], arrs[1::2], like.output, like.bound)


__all__ = [
    "AdamState", "Cache", "IDENTITY", "Mlp", "ShapeError", "TANH", "actor_forward",
    "adam_step", "backward", "critic_forward", "flatten", "forward", "init_mlp",
    "polyak_update", "unflatten",
]
