"""Cache-replacement policies behind one interface.

Every policy implements the hooks that :class:`fogcache.env.CachingEnv`
calls: ``begin_slot``, ``on_request``, ``act``, ``observe_slot`` and
``end_slot``. ``act`` receives the encoded state and the cached contents in
slot order and returns an action index: 0 keeps the cache unchanged, ``i``
evicts ``slots[i - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .neural import DuelingNet, ReplayMemory, forward, td_loss


@dataclass
class AgentConfig:
    hidden: tuple = (128, 128)
    lr: float = 0.001
    gamma: float = 0.9
    batch_size: int = 32
    memory_size: int = 10000
    sync_period: int = 100  # target sync every M SGD steps
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_fraction: float = 0.2
    reward_scale: float = 1.0


def epsilon_at(t: int, num_slots: int, cfg: AgentConfig) -> float:
    """Linear annealing from eps_start to eps_end over the first fraction of slots."""
    horizon = cfg.eps_anneal_fraction * num_slots
    if horizon <= 0 or t >= horizon:
        return cfg.eps_end
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t / horizon


class DQNAgent:
    """Dueling DQN with replay memory and a periodically synced target net.

    ``budget`` caps the number of SGD steps still allowed (None = unlimited);
    the federation layer uses it to pause a client after its local updates.
    """

    def __init__(self, state_dim: int, num_actions: int, cfg: AgentConfig, seed):
        self.cfg = cfg
        seed = list(np.atleast_1d(seed))
        self.net = DuelingNet.create(state_dim, num_actions, cfg.hidden, seed=seed + [0])
        self.target = self.net.copy()
        self.memory = ReplayMemory(cfg.memory_size, state_dim, np.random.default_rng(seed + [1]))
        self.rng = np.random.default_rng(seed + [2])
        self.steps = 0
        self.losses: list = []
        self.budget: Optional[int] = None

    @property
    def num_actions(self) -> int:
        return self.net.num_actions

    def can_train(self) -> bool:
        return len(self.memory) >= self.cfg.batch_size and (self.budget is None or self.budget > 0)

    def train_step(self) -> float:
        batch = self.memory.sample(self.cfg.batch_size)
        loss, grad = td_loss(self.net, self.target, batch, self.cfg.gamma)
        lr = self.cfg.lr
        for p, g in zip(self.net.params.layers, grad.layers):
            p.weights -= lr * g.weights
            p.biases -= lr * g.biases
        self.steps += 1
        if self.budget is not None:
            self.budget -= 1
        if self.steps % self.cfg.sync_period == 0:
            self.target = self.net.copy()
        self.losses.append(loss)
        return loss


def dqn_act(agent: DQNAgent, state, eps: float, rng: np.random.Generator,
            num_valid: Optional[int] = None) -> int:
    """Epsilon-greedy over actions ``0..num_valid-1``; argmax ties go to the lowest index."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    n = agent.num_actions if num_valid is None else min(num_valid, agent.num_actions)
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(n))
    q = forward(agent.net, state)[:n]
    return int(np.argmax(q))


def dqn_observe(agent: DQNAgent, exp) -> Optional[float]:
    """Store ``exp``; take one SGD step once the memory holds a mini-batch."""
    if agent.cfg.reward_scale != 1.0:
        exp = exp._replace(reward=exp.reward * agent.cfg.reward_scale)
    agent.memory.push(exp)
    if agent.can_train():
        return agent.train_step()
    return None


# --------------------------------------------------------------------------
# Heuristic baselines
# --------------------------------------------------------------------------


@dataclass
class PolicyStats:
    counts: np.ndarray
    last_used: np.ndarray
    clock: int = 0

    @classmethod
    def empty(cls, num_contents: int) -> "PolicyStats":
        return cls(np.zeros(num_contents, dtype=np.int64), np.full(num_contents, -1, dtype=np.int64))

    def touch(self, f: int) -> None:
        self.counts[f] += 1
        self.last_used[f] = self.clock
        self.clock += 1


def _check_cache(cache) -> np.ndarray:
    cached = np.flatnonzero(np.asarray(cache, dtype=bool))
    if cached.size == 0:
        raise ValueError("cannot evict from an empty cache")
    return cached


def lru_evict(stats: PolicyStats, cache) -> int:
    cached = _check_cache(cache)
    # argmin returns the first minimum, i.e. the lowest content id on ties
    return int(cached[np.argmin(stats.last_used[cached])])


def lfu_evict(stats: PolicyStats, cache) -> int:
    cached = _check_cache(cache)
    return int(cached[np.argmin(stats.counts[cached])])


class Policy:
    """No-op hooks; subclasses override what they need."""

    name = "base"

    def begin_slot(self, t: int) -> None:
        pass

    def on_request(self, n: int, f: int, t: int) -> None:
        pass

    def act(self, n: int, state, slots) -> int:
        raise NotImplementedError

    def observe_slot(self, experiences: dict) -> None:
        pass

    def end_slot(self, t: int) -> None:
        pass


class _HeuristicPolicy(Policy):
    rule = None

    def __init__(self, num_faps: int, num_contents: int):
        self.num_contents = num_contents
        self.stats = [PolicyStats.empty(num_contents) for _ in range(num_faps)]

    def on_request(self, n, f, t):
        self.stats[n].touch(f)

    def act(self, n, state, slots):
        cache = np.zeros(self.num_contents, dtype=bool)
        cache[slots] = True
        victim = type(self).rule(self.stats[n], cache)
        return int(np.flatnonzero(np.asarray(slots) == victim)[0]) + 1


class LRUPolicy(_HeuristicPolicy):
    name = "lru"
    rule = staticmethod(lru_evict)


class LFUPolicy(_HeuristicPolicy):
    name = "lfu"
    rule = staticmethod(lfu_evict)


class DQNPolicy(Policy):
    """One independent dueling-DQN agent per F-AP."""

    name = "dqn"

    def __init__(self, num_faps: int, state_dim: int, num_actions: int, cfg: AgentConfig,
                 num_slots: int, seed: int):
        self.cfg = cfg
        self.num_slots = num_slots
        self.agents = [DQNAgent(state_dim, num_actions, cfg, [seed, 101, n]) for n in range(num_faps)]
        self.act_rng = [np.random.default_rng([seed, 103, n]) for n in range(num_faps)]
        self.eps = cfg.eps_start
        self.frozen = False

    def begin_slot(self, t):
        self.eps = epsilon_at(t, self.num_slots, self.cfg)

    def agent_for(self, n: int) -> DQNAgent:
        return self.agents[n]

    def act(self, n, state, slots):
        return dqn_act(self.agent_for(n), state, self.eps, self.act_rng[n], len(slots) + 1)

    def observe_slot(self, experiences):
        if self.frozen:
            return
        for n in sorted(experiences):
            for exp in experiences[n]:
                dqn_observe(self.agents[n], exp)

    @property
    def losses(self) -> list:
        return [a.losses for a in self.agents]


class CentralizedPolicy(DQNPolicy):
    """A single cloud-side agent shared by every F-AP.

    Experiences from all F-APs are interleaved round-robin (F-AP 0, 1, ...,
    N-1, 0, ...) into the one replay memory.
    """

    name = "centralized"

    def __init__(self, num_faps, state_dim, num_actions, cfg, num_slots, seed):
        super().__init__(1, state_dim, num_actions, cfg, num_slots, seed)
        self.act_rng = [np.random.default_rng([seed, 103, n]) for n in range(num_faps)]

    def agent_for(self, n):
        return self.agents[0]

    def observe_slot(self, experiences):
        if self.frozen:
            return
        for exp in interleave(experiences):
            dqn_observe(self.agents[0], exp)


def interleave(experiences: dict) -> list:
    """Round-robin merge of per-F-AP experience lists in F-AP id order."""
    keys = sorted(experiences)
    out, i = [], 0
    while True:
        row = [experiences[k][i] for k in keys if i < len(experiences[k])]
        if not row:
            return out
        out.extend(row)
        i += 1
