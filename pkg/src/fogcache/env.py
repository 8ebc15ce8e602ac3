"""Simulated F-RAN world: content catalog, M-Zipf request popularity, radio
delays, cooperative cache lookup and the per-slot environment loop that the
caching policies interact with.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

MB_BITS = 8e6  # 1 MB = 8e6 bits


class UnreachableUserError(ValueError):
    """Raised when a user's downlink rate is zero."""


class CacheUpdateError(ValueError):
    """Raised for a cache update that the F-AP is not allowed to perform."""


# --------------------------------------------------------------------------
# Catalog and popularity
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Catalog:
    sizes: np.ndarray  # MB per content
    rank: np.ndarray  # 1-based global popularity rank of each content

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.float64)
        rank = np.asarray(self.rank, dtype=np.int64)
        if sizes.ndim != 1 or sizes.size == 0:
            raise ValueError("catalog needs at least one content")
        if rank.shape != sizes.shape:
            raise ValueError("rank and sizes must have the same length")
        if np.any(sizes <= 0):
            raise ValueError("content sizes must be positive")
        if not np.array_equal(np.sort(rank), np.arange(1, sizes.size + 1)):
            raise ValueError("rank must be a permutation of 1..F")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "rank", rank)

    @classmethod
    def uniform(cls, num_contents: int, size_mb: float = 1.0) -> "Catalog":
        return cls(np.full(num_contents, float(size_mb)), np.arange(1, num_contents + 1))

    @property
    def num_contents(self) -> int:
        return int(self.sizes.size)

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.sizes == self.sizes[0]))


def mzipf_weights(rank: np.ndarray, eta: float, lam: float) -> np.ndarray:
    """Normalized Mandelbrot-Zipf probabilities for 1-based ranks."""
    w = (np.asarray(rank, dtype=np.float64) + lam) ** (-eta)
    return w / w.sum()


@dataclass
class PopularityModel:
    eta: float
    lam: float
    global_p: np.ndarray  # (F,)
    local_p: np.ndarray  # (N, F)
    local_rank: np.ndarray  # (N, F) 1-based ranks used for each F-AP

    @property
    def num_faps(self) -> int:
        return self.local_p.shape[0]

    @property
    def num_contents(self) -> int:
        return self.local_p.shape[1]


def build_popularity(
    num_contents: int,
    num_faps: int,
    eta: float,
    lam: float,
    rng_seed: int,
    shuffle_fraction: float = 0.0,
    global_rank: Optional[np.ndarray] = None,
) -> PopularityModel:
    """Global and per-F-AP request distributions.

    Each F-AP starts from the global rank and permutes a seeded random subset
    of ``round(shuffle_fraction * F)`` rank positions among themselves before
    applying the M-Zipf weights. The global popularity is the mean of the
    local rows, so ``P_f = mean_n p_{n,f}`` holds exactly.
    """
    if num_contents < 1 or num_faps < 1:
        raise ValueError("need F >= 1 and N >= 1")
    if eta < 0 or lam < 0:
        raise ValueError("eta and lambda must be non-negative")
    if not 0.0 <= shuffle_fraction <= 1.0:
        raise ValueError("shuffle_fraction must lie in [0, 1]")
    if global_rank is None:
        global_rank = np.arange(1, num_contents + 1)
    global_rank = np.asarray(global_rank, dtype=np.int64)
    if not np.array_equal(np.sort(global_rank), np.arange(1, num_contents + 1)):
        raise ValueError("global_rank must be a permutation of 1..F")

    n_shuffle = int(round(shuffle_fraction * num_contents))
    local_rank = np.empty((num_faps, num_contents), dtype=np.int64)
    for n in range(num_faps):
        rank = global_rank.copy()
        if n_shuffle > 1:
            rng = np.random.default_rng([rng_seed, n])
            pos = np.sort(rng.choice(num_contents, size=n_shuffle, replace=False))
            rank[pos] = rank[pos][rng.permutation(n_shuffle)]
        local_rank[n] = rank
    local_p = np.vstack([mzipf_weights(r, eta, lam) for r in local_rank])
    global_p = local_p.mean(axis=0)
    return PopularityModel(eta, lam, global_p, local_p, local_rank)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------------------
# Radio and delay model
# --------------------------------------------------------------------------


def dbm_per_hz_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0 - 3.0)


@dataclass
class DelayModel:
    bandwidth: float = 20e6  # Hz per RB
    tx_power: float = 1.0  # W per RB
    noise_density: float = dbm_per_hz_to_watts(-174.0)  # W/Hz
    interference: float = 0.0  # W on every RB (scalar or array per RB)
    fap_delay: float = 0.002  # d^a, s
    cloud_delay: float = 0.010  # d^b, s
    pathloss_exponent: float = 3.0

    def __post_init__(self):
        for name in ("bandwidth", "tx_power", "noise_density", "fap_delay", "cloud_delay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if np.any(np.asarray(self.interference) < 0):
            raise ValueError("interference must be non-negative")

    def channel_gain(self, distance):
        return np.asarray(distance, dtype=np.float64) ** (-self.pathloss_exponent)

    def interference_on(self, rb: int) -> float:
        i = np.asarray(self.interference, dtype=np.float64)
        return float(i) if i.ndim == 0 else float(i[rb])


def interference_power(num_faps: int, kappa: float, tx_power: float, ref_gain: float) -> float:
    """Co-channel interference seen on every RB: kappa * (N - 1) * P * h_ref."""
    return kappa * max(num_faps - 1, 0) * tx_power * ref_gain


def rb_index(rb_vector) -> int:
    v = np.asarray(rb_vector)
    if v.ndim != 1 or not np.all((v == 0) | (v == 1)) or v.sum() != 1:
        raise ValueError(f"RB assignment must be one-hot, got {v.tolist()}")
    return int(np.argmax(v))


def downlink_rate(d: DelayModel, fap: "FapState", user_id: int) -> float:
    """Downlink rate (bit/s) of ``user_id`` on its assigned RB."""
    m = rb_index(fap.rb_assignment[user_id])
    h = float(d.channel_gain(fap.distances[user_id]))
    sinr = d.tx_power * h / (d.interference_on(m) + d.bandwidth * d.noise_density)
    return d.bandwidth * math.log2(1.0 + sinr)


def user_delay(d: DelayModel, rate: float, size_mb: float) -> float:
    if rate <= 0:
        raise UnreachableUserError("downlink rate is zero; user cannot be served")
    return size_mb * MB_BITS / rate


# --------------------------------------------------------------------------
# F-AP state and cache updates
# --------------------------------------------------------------------------


@dataclass
class FapState:
    fap_id: int
    capacity: float  # MB
    cache: np.ndarray  # bool (F,)
    rb_assignment: np.ndarray  # (U, M) one-hot rows
    distances: np.ndarray  # (U,) meters
    request_count: np.ndarray = None  # (F,) requests seen from own users

    def __post_init__(self):
        self.cache = np.asarray(self.cache, dtype=bool)
        if self.request_count is None:
            self.request_count = np.zeros(self.cache.size, dtype=np.int64)
        for row in np.atleast_2d(self.rb_assignment):
            rb_index(row)

    @property
    def num_users(self) -> int:
        return len(self.distances)

    def used(self, sizes: np.ndarray) -> float:
        return float(sizes[self.cache].sum())

    def has_room(self, sizes: np.ndarray, f: int) -> bool:
        return self.used(sizes) + sizes[f] <= self.capacity + 1e-9

    def cached(self) -> np.ndarray:
        return np.flatnonzero(self.cache)


def apply_cache_update(
    fap: FapState,
    sizes: np.ndarray,
    requested: int,
    evict: Optional[int] = None,
    cloud_served: bool = True,
) -> FapState:
    """Admit ``requested`` into the F-AP cache (in place).

    A free cache takes the content directly. A full cache replaces ``evict``
    with it; ``evict=None`` on a full cache is the no-replacement action and
    leaves the cache unchanged. Only cloud-served requests may update.
    """
    if not cloud_served:
        raise CacheUpdateError("cache update is only permitted for cloud-served requests")
    if fap.cache[requested]:
        raise CacheUpdateError(f"content {requested} is already cached")
    if fap.has_room(sizes, requested):
        fap.cache[requested] = True
        return fap
    if evict is None:
        return fap
    if not fap.cache[evict]:
        raise CacheUpdateError(f"cannot evict content {evict}: not cached")
    if fap.used(sizes) - sizes[evict] + sizes[requested] > fap.capacity + 1e-9:
        raise CacheUpdateError("insertion would exceed capacity even after eviction")
    fap.cache[evict] = False
    fap.cache[requested] = True
    return fap


def check_capacity(fap: FapState, sizes: np.ndarray) -> None:
    if fap.used(sizes) > fap.capacity + 1e-9:
        raise AssertionError(
            f"F-AP {fap.fap_id} holds {fap.used(sizes)} MB > capacity {fap.capacity} MB"
        )


# --------------------------------------------------------------------------
# Request service and reward
# --------------------------------------------------------------------------


class Source(enum.IntEnum):
    LOCAL = 0
    NEIGHBOR = 1
    CLOUD = 2


class ServiceOutcome(NamedTuple):
    source: Source
    fap: Optional[int] = None  # serving neighbor for Source.NEIGHBOR


class RequestEvent(NamedTuple):
    time_slot: int
    fap_id: int
    user_id: int
    content: int


class DelayTerms(NamedTuple):
    fu: float  # D^{F-U}
    ffu: float  # D^{F-F-U}
    cfu: float  # D^{C-F-U}


@dataclass
class World:
    catalog: Catalog
    popularity: PopularityModel
    delay: DelayModel
    faps: list
    zeta: tuple = (0.1, 0.2, 0.7)
    access_delay: np.ndarray = field(default=None, repr=False)  # (N, U) s per MB

    def __post_init__(self):
        if self.access_delay is None:
            self.refresh_access_delay()

    def refresh_access_delay(self):
        rows = []
        for fap in self.faps:
            rows.append(
                [user_delay(self.delay, downlink_rate(self.delay, fap, u), 1.0)
                 for u in range(fap.num_users)]
            )
        self.access_delay = np.asarray(rows, dtype=np.float64)

    @property
    def num_faps(self) -> int:
        return len(self.faps)

    def cache_matrix(self) -> np.ndarray:
        return np.vstack([fap.cache for fap in self.faps])

    def access(self, fap_id: int, user_id: int, content: int) -> float:
        """d^c_n for this user and content."""
        return float(self.access_delay[fap_id, user_id] * self.catalog.sizes[content])


def serve_request(world: World, event: RequestEvent, snapshot: Optional[np.ndarray] = None):
    """Route a request local -> lowest-id neighbor caching it -> cloud.

    ``snapshot`` is the (N, F) cache matrix used for neighbor lookups; when
    omitted the live caches are used.
    """
    n, f = event.fap_id, event.content
    dc = world.access(n, event.user_id, f)
    if world.faps[n].cache[f]:
        return ServiceOutcome(Source.LOCAL), dc
    holders = world.cache_matrix()[:, f] if snapshot is None else snapshot[:, f]
    for l in np.flatnonzero(holders):
        if l != n:
            return ServiceOutcome(Source.NEIGHBOR, int(l)), dc + world.delay.fap_delay
    return ServiceOutcome(Source.CLOUD), dc + world.delay.cloud_delay


def check_zeta(zeta) -> tuple:
    z = tuple(float(x) for x in zeta)
    if len(z) != 3 or min(z) < 0 or abs(sum(z) - 1.0) > 1e-9:
        raise ValueError(f"reward weights must lie on the simplex, got {zeta}")
    return z


def reward(source: Source, delays: DelayTerms, zeta) -> float:
    z1, z2, z3 = check_zeta(zeta)
    source = source.source if isinstance(source, ServiceOutcome) else Source(source)
    if source == Source.LOCAL:
        return -z1 * delays.fu
    if source == Source.NEIGHBOR:
        return -(z2 * delays.ffu + z1 * delays.fu)
    return -(z3 * delays.cfu + z1 * delays.fu)


def slot_delay_terms(sources, delays) -> DelayTerms:
    """Realized D-terms of one F-AP's slot: per-path delay sums over the
    slot's requests, each request weighted by 1/(requests in slot)."""
    sources = np.asarray(sources)
    delays = np.asarray(delays, dtype=np.float64)
    if sources.size == 0:
        return DelayTerms(0.0, 0.0, 0.0)
    w = 1.0 / sources.size
    return DelayTerms(
        float(delays[sources == Source.LOCAL].sum() * w),
        float(delays[sources == Source.NEIGHBOR].sum() * w),
        float(delays[sources == Source.CLOUD].sum() * w),
    )


def expected_delay_terms(world: World, fap_id: int, snapshot: np.ndarray) -> DelayTerms:
    """D-terms as expectations over the F-AP's request distribution given the
    current cache state (the popularity-weighted form of the delay sums)."""
    fap = world.faps[fap_id]
    p = world.popularity.local_p[fap_id]
    dc = world.access_delay[fap_id].mean() * world.catalog.sizes
    local = fap.cache
    others = np.delete(snapshot, fap_id, axis=0).any(axis=0) if world.num_faps > 1 else np.zeros_like(local)
    nbr = ~local & others
    cloud = ~local & ~others
    return DelayTerms(
        float((p * dc)[local].sum()),
        float((p * (dc + world.delay.fap_delay))[nbr].sum()),
        float((p * (dc + world.delay.cloud_delay))[cloud].sum()),
    )


# --------------------------------------------------------------------------
# State encoding and world construction
# --------------------------------------------------------------------------


def encode_state(cache: np.ndarray, content: int, rb_norm: float) -> np.ndarray:
    """Cache bits ++ request one-hot ++ normalized RB index (length 2F+1)."""
    F = cache.size
    s = np.zeros(2 * F + 1)
    s[:F] = cache
    s[F + content] = 1.0
    s[-1] = rb_norm
    return s


def slot_order(fap: FapState) -> np.ndarray:
    """Cached contents in slot order: fewest local requests first, ties by id.

    Action ``i >= 1`` of a replacement policy evicts ``slot_order(fap)[i - 1]``.
    """
    cached = fap.cached()
    order = np.lexsort((cached, fap.request_count[cached]))
    return cached[order]


@dataclass
class WorldParams:
    num_contents: int = 200
    num_faps: int = 5
    users_per_fap: int = 10
    num_rbs: int = 10
    capacity_mb: float = 20.0
    content_size_mb: float = 1.0
    eta: float = 0.8
    lam: float = 0.1
    shuffle_fraction: float = 0.3
    bandwidth: float = 20e6
    tx_power: float = 1.0
    noise_dbm_hz: float = -174.0
    fap_delay: float = 0.002
    cloud_delay: float = 0.010
    pathloss_exponent: float = 3.0
    coverage_radius: float = 100.0
    min_distance: float = 10.0
    kappa: float = 0.01
    zeta: tuple = (0.1, 0.2, 0.7)


def build_world(params: WorldParams, seed: int) -> World:
    """Deterministic world: per-F-AP seeded streams keep F-AP ``n``'s users
    identical when only the number of F-APs changes."""
    N, U = params.num_faps, params.users_per_fap
    catalog = Catalog.uniform(params.num_contents, params.content_size_mb)
    pop = build_popularity(
        params.num_contents, N, params.eta, params.lam, seed, params.shuffle_fraction
    )
    ref_gain = params.coverage_radius ** (-params.pathloss_exponent)
    delay = DelayModel(
        bandwidth=params.bandwidth,
        tx_power=params.tx_power,
        noise_density=dbm_per_hz_to_watts(params.noise_dbm_hz),
        interference=interference_power(N, params.kappa, params.tx_power, ref_gain),
        fap_delay=params.fap_delay,
        cloud_delay=params.cloud_delay,
        pathloss_exponent=params.pathloss_exponent,
    )
    faps = []
    for n in range(N):
        rng = np.random.default_rng([seed, 7, n])
        # uniform in the coverage disc, clipped away from the antenna
        dist = params.coverage_radius * np.sqrt(rng.uniform(size=U))
        dist = np.maximum(dist, params.min_distance)
        rb = np.zeros((U, params.num_rbs), dtype=np.int64)
        rb[np.arange(U), np.arange(U) % params.num_rbs] = 1
        faps.append(
            FapState(n, params.capacity_mb, np.zeros(params.num_contents, bool), rb, dist)
        )
    return World(catalog, pop, delay, faps, check_zeta(params.zeta))


def generate_requests(pop: PopularityModel, num_slots: int, users: int, seed: int) -> np.ndarray:
    """(T, N, U) content ids; F-AP ``n`` draws from its own seeded stream."""
    out = np.empty((num_slots, pop.num_faps, users), dtype=np.int64)
    for n in range(pop.num_faps):
        rng = np.random.default_rng([seed, 11, n])
        cdf = np.cumsum(pop.local_p[n])
        cdf[-1] = 1.0
        u = rng.uniform(size=(num_slots, users))
        out[:, n, :] = np.searchsorted(cdf, u, side="right")
    return out


# --------------------------------------------------------------------------
# Slot loop
# --------------------------------------------------------------------------


class Experience(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


@dataclass
class FapSlotLog:
    sources: np.ndarray  # Source per request
    delays: np.ndarray  # s per request
    rewards: np.ndarray  # per-request reward
    decisions: int

    @property
    def requests(self) -> int:
        return int(self.sources.size)

    def count(self, source: Source) -> int:
        return int(np.count_nonzero(self.sources == source))


class CachingEnv:
    """Runs slots of the three-phase F-RAN operation against a policy.

    Per slot: neighbor lookups see the slot-start cache snapshot, each F-AP
    updates its own cache as its users' requests arrive, and rewards and
    experiences are finalized at the slot-end barrier.

    The policy is duck-typed: ``begin_slot(t)``, ``on_request(n, f, t)``,
    ``act(n, state, slots) -> int``, ``observe_slot({n: [Experience]})`` and
    ``end_slot(t)``.
    """

    def __init__(self, world: World, requests: np.ndarray, reward_mode: str = "realized",
                 check_invariants: bool = True):
        if reward_mode not in ("realized", "expected"):
            raise ValueError(f"unknown reward_mode {reward_mode!r}")
        if not world.catalog.is_uniform:
            raise ValueError("the slot loop assumes uniform content sizes")
        self.world = world
        self.requests = requests
        self.reward_mode = reward_mode
        self.check_invariants = check_invariants
        self.t = 0
        n_rb = world.faps[0].rb_assignment.shape[1]
        self._rb_norm = np.array(
            [[rb_index(r) / max(n_rb - 1, 1) for r in fap.rb_assignment] for fap in world.faps]
        )
        # open transition per F-AP: (state, action, accumulated reward)
        self._pending: dict = {}

    @property
    def num_slots(self) -> int:
        return self.requests.shape[0]

    def run_slot(self, policy) -> list:
        t = self.t
        w = self.world
        sizes = w.catalog.sizes
        snapshot = w.cache_matrix()
        policy.begin_slot(t)
        logs, experiences = [], {}
        for n, fap in enumerate(w.faps):
            reqs = self.requests[t, n]
            U = reqs.size
            sources = np.empty(U, dtype=np.int64)
            delays = np.empty(U)
            exp_terms = [None] * U
            decided = {}
            holders_other = snapshot.copy()
            holders_other[n] = False
            for u in range(U):
                f = int(reqs[u])
                fap.request_count[f] += 1
                policy.on_request(n, f, t)
                if self.reward_mode == "expected":
                    exp_terms[u] = expected_delay_terms(w, n, snapshot)
                dc = w.access(n, u, f)
                if fap.cache[f]:
                    sources[u], delays[u] = Source.LOCAL, dc
                    continue
                if holders_other[:, f].any():
                    sources[u], delays[u] = Source.NEIGHBOR, dc + w.delay.fap_delay
                    continue
                sources[u], delays[u] = Source.CLOUD, dc + w.delay.cloud_delay
                if fap.has_room(sizes, f):
                    apply_cache_update(fap, sizes, f)
                else:
                    slots = slot_order(fap)
                    state = encode_state(fap.cache, f, self._rb_norm[n, u])
                    a = int(policy.act(n, state, slots))
                    if not 0 <= a <= len(slots):
                        raise AssertionError(f"invalid action {a} for {len(slots)} slots")
                    apply_cache_update(fap, sizes, f, None if a == 0 else int(slots[a - 1]))
                    decided[u] = (state, a)
                if self.check_invariants:
                    check_capacity(fap, sizes)

            if self.reward_mode == "realized":
                terms = slot_delay_terms(sources, delays)
                rewards = np.array([reward(Source(s), terms, w.zeta) for s in sources])
            else:
                rewards = np.array(
                    [reward(Source(s), exp_terms[u], w.zeta) for u, s in enumerate(sources)]
                )
            exps = []
            pend = self._pending.get(n)
            for u in range(U):
                if pend is not None:
                    pend[2] += rewards[u]
                if u in decided:
                    state, a = decided[u]
                    if pend is not None:
                        exps.append(Experience(pend[0], pend[1], float(pend[2]), state))
                    pend = [state, a, 0.0]
            self._pending[n] = pend
            experiences[n] = exps
            logs.append(FapSlotLog(sources, delays, rewards, len(decided)))
        policy.observe_slot(experiences)
        policy.end_slot(t)
        self.t += 1
        return logs
