"""Periodic federated aggregation of compressed model deltas.

Each period every client starts from the broadcast global model, performs
``X`` local SGD steps, uploads its (optionally compressed) delta, and the
server moves the global model by the dataset-size-weighted mean of the
decoded deltas. Only parameter payloads cross the client/server boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .agents import AgentConfig, DQNPolicy
from .fedcompress import QuantizedUpdate, compress, decode
from .neural import DuelingNet, LayeredParams


@dataclass
class FedConfig:
    num_periods: int = 250  # Y
    local_updates: int = 20  # X, SGD steps per client per period
    lr_b: float = 2.0  # decaying schedule phi_t = b / (t + a), convex testbed
    lr_a: float = 10.0
    keep_fraction: float = 0.9
    clusters: int = 32
    bit_width: int = 32
    compressed: bool = True  # False: upload raw deltas (plain federated baseline)
    weighting: str = "dataset"  # or "equal"

    def __post_init__(self):
        if self.num_periods < 0 or self.local_updates < 1:
            raise ValueError("need Y >= 0 and X >= 1")
        if self.weighting not in ("dataset", "equal"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def lr(self, t: int) -> float:
        return self.lr_b / (t + self.lr_a)


@dataclass
class RoundRecord:
    period: int
    bit_costs: list  # per client uploaded bits
    raw_bits: list  # per client bits of the uncompressed delta
    checksum: str
    mean_loss: float
    update_norm: float  # ||theta_{y+1} - theta_y||, the convergence proxy
    slot: int = -1

    @property
    def ratio(self) -> float:
        return sum(self.bit_costs) / sum(self.raw_bits)


def checksum(params: LayeredParams) -> str:
    return hashlib.sha256(params.to_bytes()).hexdigest()[:16]


@dataclass
class RawUpdate:
    """Uncompressed delta upload."""

    delta: LayeredParams
    dataset_size: float
    bit_width: int = 32

    @property
    def bit_cost(self) -> int:
        return self.delta.num_params * self.bit_width

    raw_bits = bit_cost


def make_update(theta: LayeredParams, local: LayeredParams, dataset_size: float,
                cfg: FedConfig, seed: int = 0):
    if cfg.compressed:
        return compress(theta, local, cfg.keep_fraction, cfg.clusters, dataset_size, seed,
                        cfg.bit_width)
    return RawUpdate(local - theta, float(dataset_size), cfg.bit_width)


def decoded_delta(update, reference: LayeredParams) -> LayeredParams:
    if isinstance(update, QuantizedUpdate):
        return decode(update, reference)
    if not update.delta.conformable(reference):
        raise ValueError("update does not match the global model")
    return update.delta


def aggregate(theta: LayeredParams, updates: Sequence, weighting: str = "dataset") -> LayeredParams:
    """theta + sum_n D_n * decode(update_n) / sum_n D_n."""
    if not updates:
        raise ValueError("no updates to aggregate")
    w = np.array([u.dataset_size if weighting == "dataset" else 1.0 for u in updates], float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("aggregation weights must be non-negative with a positive sum")
    w = w / w.sum()
    flat = theta.flat()
    acc = np.zeros_like(flat)
    for wi, u in zip(w, updates):
        acc += wi * decoded_delta(u, theta).flat()
    return theta.from_flat(flat + acc)


def aggregate_period(theta: LayeredParams, local_params: Sequence[LayeredParams],
                     dataset_sizes: Sequence[float], cfg: FedConfig, period: int,
                     losses: Sequence[float] = (), seed: int = 0):
    """Upload every client's delta and form the next global model."""
    updates = [
        make_update(theta, p, d, cfg, seed=seed + n) for n, (p, d) in enumerate(zip(local_params, dataset_sizes))
    ]
    new = aggregate(theta, updates, cfg.weighting)
    record = RoundRecord(
        period=period,
        bit_costs=[int(u.bit_cost) for u in updates],
        raw_bits=[int(p.num_params * cfg.bit_width) for p in local_params],
        checksum=checksum(new),
        mean_loss=float(np.mean(losses)) if len(losses) else float("nan"),
        update_norm=(new - theta).norm(),
    )
    return new, record


def run_period(theta: LayeredParams, clients: Sequence, cfg: FedConfig, period: int = 0):
    """One synchronous period with clients exposing ``train(theta, X)``.

    ``train`` returns ``(local_params, dataset_size, losses)``.
    """
    locals_, sizes, losses = [], [], []
    for c in clients:
        p, d, l = c.train(theta.copy(), cfg.local_updates)
        if not p.conformable(theta):
            raise ValueError("client returned params that do not match the global model")
        locals_.append(p)
        sizes.append(d)
        losses.extend(l)
    return aggregate_period(theta, locals_, sizes, cfg, period, losses)


def uploaded_ratio(records: Sequence[RoundRecord]) -> float:
    """Cumulative uploaded bits over the bits of uncompressed uploads."""
    if not records:
        raise ValueError("no records")
    return sum(sum(r.bit_costs) for r in records) / sum(sum(r.raw_bits) for r in records)


class FederatedPolicy(DQNPolicy):
    """Per-F-AP DQN clients federated every ``X`` local SGD steps.

    A client that has used its step budget keeps collecting experiences but
    pauses training; once every client has finished its ``X`` steps the
    server aggregates at the slot-end barrier and broadcasts. After ``Y``
    periods the clients stop training.
    """

    def __init__(self, num_faps, state_dim, num_actions, cfg: AgentConfig, num_slots, seed,
                 fed: FedConfig):
        super().__init__(num_faps, state_dim, num_actions, cfg, num_slots, seed)
        self.fed = fed
        self.name = "frlq" if fed.compressed else "frl"
        self.seed = seed
        self.theta = self.agents[0].net.params.copy()
        self.records: list = []
        self._loss_mark = [0] * num_faps
        self._broadcast()

    @property
    def period(self) -> int:
        return len(self.records)

    def _broadcast(self):
        done = self.period >= self.fed.num_periods
        for a in self.agents:
            a.net = DuelingNet(self.theta.copy())
            a.budget = 0 if done else self.fed.local_updates
        self.frozen = done

    def end_slot(self, t):
        if self.frozen or any(a.budget > 0 for a in self.agents):
            return
        losses = []
        for n, a in enumerate(self.agents):
            losses.extend(a.losses[self._loss_mark[n]:])
            self._loss_mark[n] = len(a.losses)
        new, rec = aggregate_period(
            self.theta,
            [a.net.params for a in self.agents],
            [len(a.memory) for a in self.agents],
            self.fed,
            self.period,
            losses,
            seed=self.seed,
        )
        rec.slot = t
        self.records.append(rec)
        self.theta = new
        self._broadcast()


def run_training(env, policy: FederatedPolicy, max_slots: Optional[int] = None) -> list:
    """Drive ``env`` until the policy has completed its periods or slots run out."""
    limit = env.num_slots if max_slots is None else min(max_slots, env.num_slots)
    while env.t < limit and not policy.frozen:
        env.run_slot(policy)
    return policy.records
