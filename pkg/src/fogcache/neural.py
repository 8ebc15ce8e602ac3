"""Dense dueling Q-network in plain numpy.

Parameters live in :class:`LayeredParams`, an ordered list of layers whose
weights are flat row-major ``(in_dim, out_dim)`` arrays. The network layout is
``[trunk_1, ..., trunk_k, value_head, advantage_head]`` with ReLU on the trunk
and linear heads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

_HEADER_LEN = struct.Struct("<I")


@dataclass
class Layer:
    weights: np.ndarray
    biases: np.ndarray
    in_dim: int
    out_dim: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.biases = np.asarray(self.biases, dtype=np.float64).ravel()
        if self.weights.size != self.in_dim * self.out_dim or self.biases.size != self.out_dim:
            raise ValueError(
                f"layer arrays ({self.weights.size}, {self.biases.size}) do not match "
                f"dims {self.in_dim}x{self.out_dim}"
            )

    @property
    def W(self) -> np.ndarray:
        return self.weights.reshape(self.in_dim, self.out_dim)

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size

    def pooled(self) -> np.ndarray:
        """Weights then biases as one flat array."""
        return np.concatenate([self.weights, self.biases])

    def with_pooled(self, flat: np.ndarray) -> "Layer":
        nw = self.weights.size
        return Layer(flat[:nw].copy(), flat[nw:].copy(), self.in_dim, self.out_dim)


class LayeredParams:
    """Ordered layers supporting elementwise +, -, scalar * and per-layer iteration."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i) -> Layer:
        return self.layers[i]

    @property
    def dims(self) -> list:
        return [(l.in_dim, l.out_dim) for l in self.layers]

    @property
    def num_params(self) -> int:
        return sum(l.size for l in self.layers)

    def conformable(self, other: "LayeredParams") -> bool:
        return self.dims == other.dims

    def _check(self, other):
        if not self.conformable(other):
            raise ValueError(f"non-conformable params: {self.dims} vs {other.dims}")

    def _zip(self, other, op):
        self._check(other)
        return LayeredParams(
            Layer(op(a.weights, b.weights), op(a.biases, b.biases), a.in_dim, a.out_dim)
            for a, b in zip(self.layers, other.layers)
        )

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def __mul__(self, c: float):
        return LayeredParams(
            Layer(a.weights * c, a.biases * c, a.in_dim, a.out_dim) for a in self.layers
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def copy(self) -> "LayeredParams":
        return LayeredParams(
            Layer(l.weights.copy(), l.biases.copy(), l.in_dim, l.out_dim) for l in self.layers
        )

    def zeros_like(self) -> "LayeredParams":
        return self * 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([l.pooled() for l in self.layers])

    def from_flat(self, flat: np.ndarray) -> "LayeredParams":
        out, i = [], 0
        for l in self.layers:
            out.append(l.with_pooled(flat[i:i + l.size]))
            i += l.size
        if i != flat.size:
            raise ValueError("flat vector length does not match params")
        return LayeredParams(out)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.dot(l.pooled(), l.pooled()) for l in self.layers)))

    def bitwise_equal(self, other: "LayeredParams") -> bool:
        return self.conformable(other) and all(
            np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)
            for a, b in zip(self.layers, other.layers)
        )

    # -- serialization: uint32 header length, JSON header, little-endian f64 payload

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"format": "layered-params/1", "layers": [[i, o] for i, o in self.dims]},
            separators=(",", ":"),
            sort_keys=True,
        ).encode()
        payload = self.flat().astype("<f8").tobytes()
        return _HEADER_LEN.pack(len(header)) + header + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "LayeredParams":
        (hlen,) = _HEADER_LEN.unpack_from(data, 0)
        header = json.loads(data[4:4 + hlen])
        if header.get("format") != "layered-params/1":
            raise ValueError("not a layered-params stream")
        flat = np.frombuffer(data, dtype="<f8", offset=4 + hlen).astype(np.float64)
        layers, i = [], 0
        for in_dim, out_dim in header["layers"]:
            nw = in_dim * out_dim
            layers.append(Layer(flat[i:i + nw], flat[i + nw:i + nw + out_dim], in_dim, out_dim))
            i += nw + out_dim
        if i != flat.size:
            raise ValueError("payload length does not match header")
        return cls(layers)


def init_layer(in_dim: int, out_dim: int, rng: np.random.Generator) -> Layer:
    bound = 1.0 / np.sqrt(in_dim)
    return Layer(
        rng.uniform(-bound, bound, size=in_dim * out_dim),
        rng.uniform(-bound, bound, size=out_dim),
        in_dim,
        out_dim,
    )


class DuelingNet:
    """Q(s, .) = V(s) + A(s, .) - mean(A(s, .)) over a ReLU trunk."""

    def __init__(self, params: LayeredParams):
        if len(params) < 3 or params[-2].out_dim != 1:
            raise ValueError("expected trunk layers followed by value (1 out) and advantage heads")
        trunk_out = params[-3].out_dim
        if params[-2].in_dim != trunk_out or params[-1].in_dim != trunk_out:
            raise ValueError("heads must read the trunk output")
        self.params = params

    @classmethod
    def create(cls, in_dim: int, num_actions: int, hidden=(128, 128), seed=0) -> "DuelingNet":
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden]
        layers = [init_layer(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        layers.append(init_layer(dims[-1], 1, rng))
        layers.append(init_layer(dims[-1], num_actions, rng))
        return cls(LayeredParams(layers))

    @property
    def in_dim(self) -> int:
        return self.params[0].in_dim

    @property
    def num_actions(self) -> int:
        return self.params[-1].out_dim

    def copy(self) -> "DuelingNet":
        return DuelingNet(self.params.copy())

    def _heads(self, X):
        acts = [X]
        first = self.params[0]
        cols = _active_columns(X)
        if cols is None:
            h = X @ first.W
        else:
            h = X[:, cols] @ first.W[cols]
        h = np.maximum(h + first.biases, 0.0)
        acts.append(h)
        for layer in self.params.layers[1:-2]:
            h = np.maximum(h @ layer.W + layer.biases, 0.0)
            acts.append(h)
        v_layer, a_layer = self.params[-2], self.params[-1]
        V = h @ v_layer.W + v_layer.biases
        A = h @ a_layer.W + a_layer.biases
        return acts, V, A

    def q_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise ValueError(f"state length {X.shape[1]} != input dim {self.in_dim}")
        _, V, A = self._heads(X)
        return V + A - A.mean(axis=1, keepdims=True)

    def value_advantage(self, state):
        X = np.atleast_2d(np.asarray(state, dtype=np.float64))
        _, V, A = self._heads(X)
        return V[0, 0], A[0]


def _active_columns(X: np.ndarray):
    """Indices of input columns with any nonzero entry, when that skips most of them."""
    cols = np.flatnonzero(X.any(axis=0))
    return cols if cols.size * 2 < X.shape[1] else None


def forward(net: DuelingNet, state) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 1:
        raise ValueError("forward expects a single state vector")
    return net.q_batch(state[None, :])[0]


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    @classmethod
    def from_experiences(cls, experiences) -> "Batch":
        return cls(
            np.array([e.state for e in experiences], dtype=np.float64),
            np.array([e.action for e in experiences], dtype=np.int64),
            np.array([e.reward for e in experiences], dtype=np.float64),
            np.array([e.next_state for e in experiences], dtype=np.float64),
        )


def td_loss(pred: DuelingNet, target: DuelingNet, batch, gamma: float):
    """Mean squared TD error against the target network and its gradient
    with respect to the prediction network's parameters."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    if not isinstance(batch, Batch):
        batch = Batch.from_experiences(batch)
    B = batch.actions.size
    if B == 0:
        raise ValueError("empty batch")
    y = batch.rewards + gamma * target.q_batch(batch.next_states).max(axis=1)

    acts, V, A = pred._heads(batch.states)
    Q = V + A - A.mean(axis=1, keepdims=True)
    rows = np.arange(B)
    err = y - Q[rows, batch.actions]
    loss = float(np.mean(err ** 2))

    dq = -2.0 * err / B  # dL/dQ(s_b, a_b)
    nA = A.shape[1]
    dA = np.full((B, nA), -1.0 / nA) * dq[:, None]
    dA[rows, batch.actions] += dq
    dV = dq[:, None]

    layers = pred.params.layers
    h = acts[-1]
    v_layer, a_layer = layers[-2], layers[-1]
    grads = [None] * len(layers)
    grads[-2] = Layer((h.T @ dV).ravel(), dV.sum(axis=0), v_layer.in_dim, v_layer.out_dim)
    grads[-1] = Layer((h.T @ dA).ravel(), dA.sum(axis=0), a_layer.in_dim, a_layer.out_dim)
    dh = dV @ v_layer.W.T + dA @ a_layer.W.T
    for i in range(len(layers) - 3, -1, -1):
        layer = layers[i]
        dz = dh * (acts[i + 1] > 0)
        cols = _active_columns(acts[i]) if i == 0 else None
        if cols is None:
            gw = acts[i].T @ dz
        else:
            # rows of inactive inputs have an exactly zero gradient
            gw = np.zeros((layer.in_dim, layer.out_dim))
            gw[cols] = acts[i][:, cols].T @ dz
        grads[i] = Layer(gw.ravel(), dz.sum(axis=0), layer.in_dim, layer.out_dim)
        if i:
            dh = dz @ layer.W.T
    return loss, LayeredParams(grads)


def sgd_step(params: LayeredParams, grad: LayeredParams, lr: float) -> LayeredParams:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return params - grad * lr


def sync_target(pred: DuelingNet, target: DuelingNet, step: int, period: int) -> DuelingNet:
    if period < 1:
        raise ValueError("sync period must be >= 1")
    return pred.copy() if step % period == 0 else target


class ReplayMemory:
    """Fixed-capacity ring buffer; mini-batches are drawn without replacement."""

    def __init__(self, capacity: int, state_dim: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, exp) -> None:
        if len(exp.state) != self.states.shape[1] or len(exp.next_state) != self.states.shape[1]:
            raise ValueError("experience state length does not match the memory")
        i = self._next
        self.states[i] = exp.state
        self.actions[i] = exp.action
        self.rewards[i] = exp.reward
        self.next_states[i] = exp.next_state
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size > self._size:
            raise ValueError("not enough experiences for a mini-batch")
        return self.rng.choice(self._size, size=batch_size, replace=False)

    def sample(self, batch_size: int) -> Batch:
        idx = self.sample_indices(batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx])
