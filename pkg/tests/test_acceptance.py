"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict (shown in the terminal
summary) and then asserts it. Thresholds are the contract values; nothing
here is tuned to make a criterion pass.
"""

import functools
import math
import time

import numpy as np
import pytest

from fogcache import cli, sim
from fogcache import convergence as cv
from fogcache.agents import AgentConfig, DQNPolicy
from fogcache.config import SimConfig
from fogcache.env import CachingEnv, build_world, generate_requests
from fogcache.fedcompress import compression_rate
from fogcache.federation import FederatedPolicy, run_training, uploaded_ratio
from fogcache.neural import Batch, DuelingNet, forward, td_loss

CLUSTER_SWEEP = (4, 16, 32, 64)


def desk(**sections):
    return SimConfig().replace(**sections)


@functools.lru_cache(maxsize=None)
def federated_run(keep: float, clusters: int, seed: int, periods: int = 50):
    """Train FRLQ at desk scale (N=5, X=20) until ``periods`` aggregations."""
    cfg = desk(fed={"num_periods": periods, "keep_fraction": keep, "clusters": clusters},
               run={"seed": seed})
    world = build_world(cfg.world, seed)
    req = generate_requests(world.popularity, cfg.run.num_slots, cfg.world.users_per_fap, seed)
    env = CachingEnv(world, req, cfg.run.reward_mode)
    pol = sim.make_policy(cfg, world, "frlq")
    records = run_training(env, pol)
    return records


@functools.lru_cache(maxsize=None)
def summary_hit_rate(policy: str, seed: int, **world):
    cfg = desk(world=dict(world), run={"seed": seed})
    return sim.run_experiment(cfg, policy).summary_hit_rate()


# -- 1 --------------------------------------------------------------------------------


def test_criterion_01_compression_rate(record):
    t0 = time.perf_counter()
    worked = compression_rate(16, 32, 4) == 3.2
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 4097))
        n = int(rng.integers(k, 10 ** 7))
        b = int(rng.integers(1, 65))
        oracle = (n * b) / (n * math.log(k, 2) + k * b)
        worst = max(worst, abs(compression_rate(n, b, k) - oracle) / oracle)
    elapsed = time.perf_counter() - t0
    ok = worked and worst <= 1e-12 and elapsed < 1.0
    record(1, ok, f"r(16,32,4)==3.2: {worked}; max rel err {worst:.1e}; {elapsed:.2f}s")
    assert ok


# -- 2 --------------------------------------------------------------------------------


def test_criterion_02_uploaded_ratio_bands(record):
    t0 = time.perf_counter()
    bands = {0.9: (0.45, 0.65), 0.8: (0.25, 0.45)}
    ratios = {(keep, k): uploaded_ratio(federated_run(keep, k, 0)) for keep in bands for k in CLUSTER_SWEEP}
    elapsed = time.perf_counter() - t0
    hit = {keep: [k for k in CLUSTER_SWEEP if lo <= ratios[keep, k] <= hi] for keep, (lo, hi) in bands.items()}
    ok = all(hit.values()) and elapsed < 180
    detail = "; ".join(
        f"keep {keep}: " + ", ".join(f"k={k} {ratios[keep, k]:.3f}" for k in CLUSTER_SWEEP) + f" (band {lo}-{hi})"
        for keep, (lo, hi) in bands.items()
    )
    record(2, ok, f"{detail}; {elapsed:.0f}s")
    assert ok


# -- 3 and 4 ------------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def theorem_traces():
    t0 = time.perf_counter()
    traces = sim.theorem_sweep(seed=0, replicas=200, periods_steps=100, mutation=True)
    return traces, time.perf_counter() - t0


def test_criterion_03_theorem2_bound(record):
    traces, elapsed = theorem_traces()
    grid = [(n, tr) for n, tr in traces if not n.startswith("near-iid")]
    reports = [cv.check_theorem2(tr) for _, tr in grid]
    steps = sum(r.holds.size for r in reports)
    bad = sum(r.violations for r in reports)
    ok = len(grid) >= 10 and bad == 0 and all(tr.replicas >= 200 for _, tr in grid) and elapsed < 120
    record(3, ok, f"{len(grid)} instances, {steps} steps, {bad} violations; {elapsed:.1f}s")
    assert ok


def test_criterion_04_theorem1_and_mutation(record):
    traces, _ = theorem_traces()
    grid = [tr for n, tr in traces if not n.startswith("near-iid")]
    bad = sum(cv.check_theorem1(tr).violations for tr in grid)
    # the probe instances are heterogeneous too (small but non-zero center spread)
    mutated = {n: cv.check_theorem1(tr, h_scale=0.5).violations for n, tr in traces if tr.phi_gap > 0}
    caught = [n for n, v in mutated.items() if v > 0]
    ok = bad == 0 and len(caught) >= 1
    record(4, ok, f"{bad} violations on {len(grid)} instances; halved H caught on {caught}")
    assert ok


# -- 5 and 6 ------------------------------------------------------------------------------


def finite_difference(net, target, batch, gamma, h=1e-6):
    flat = net.params.flat()
    out = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        lp, _ = td_loss(DuelingNet(net.params.from_flat(up)), target, batch, gamma)
        lm, _ = td_loss(DuelingNet(net.params.from_flat(down)), target, batch, gamma)
        out[i] = (lp - lm) / (2 * h)
    return out


def test_criterion_05_gradient_correctness(record):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([5, i])
        in_dim, actions = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3))))
        net = DuelingNet.create(in_dim, actions, hidden, seed=[i, 0])
        target = DuelingNet.create(in_dim, actions, hidden, seed=[i, 1])
        size = int(rng.integers(1, 9))
        batch = Batch(rng.normal(size=(size, in_dim)), rng.integers(actions, size=size),
                      rng.normal(size=size), rng.normal(size=(size, in_dim)))
        gamma = float(rng.uniform(0, 0.99))
        _, grad = td_loss(net, target, batch, gamma)
        fd = finite_difference(net, target, batch, gamma)
        g = grad.flat()
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 30
    record(5, ok, f"max rel err {worst:.2e} over 100 instances; {elapsed:.1f}s")
    assert ok


def test_criterion_06_dueling_identifiability(record):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([6, i])
        in_dim = int(rng.integers(2, 50))
        net = DuelingNet.create(in_dim, int(rng.integers(2, 30)), (16, 16), seed=i)
        s = rng.normal(size=in_dim)
        q0 = forward(net, s)
        net.params[-1].biases += rng.normal() * 10
        worst = max(worst, float(np.abs(forward(net, s) - q0).max()))
    ok = worst <= 1e-12
    record(6, ok, f"max |dQ| under advantage shift {worst:.1e}")
    assert ok


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_07_learning_beats_heuristics(record):
    t0 = time.perf_counter()
    seeds = range(5)
    rates = {p: [summary_hit_rate(p, s) for s in seeds] for p in ("frlq", "lru", "lfu")}
    wins = sum(f > l and f > u for f, l, u in zip(rates["frlq"], rates["lru"], rates["lfu"]))
    base = SimConfig().world.capacity_mb
    sweep = {p: [summary_hit_rate(p, 0) if c == base else summary_hit_rate(p, 0, capacity_mb=float(c))
                 for c in (10, 20, 40, 80)] for p in ("frlq", "lru", "lfu")}
    mono = {p: all(b >= a for a, b in zip(v, v[1:])) for p, v in sweep.items()}
    elapsed = time.perf_counter() - t0
    ok = wins >= 4 and all(mono.values()) and elapsed < 600
    fmt = lambda v: "/".join(f"{x:.3f}" for x in v)  # noqa: E731
    record(7, ok, f"frlq wins {wins}/5 (frlq {fmt(rates['frlq'])}, lru {fmt(rates['lru'])}, "
                  f"lfu {fmt(rates['lfu'])}); cache sweep monotone {mono}; {elapsed:.0f}s")
    assert ok


# -- 8 ---------------------------------------------------------------------------------

TREND_POLICIES = ("lru", "lfu", "frlq")
TREND_SLOTS = 1000


def delay(policy, seed, **world):
    cfg = desk(world=world, run={"seed": seed, "num_slots": TREND_SLOTS})
    return sim.run_experiment(cfg, policy).summary_delay()


def test_criterion_08_skewness_and_scale_trends(record):
    t0 = time.perf_counter()
    bad = []
    for p in TREND_POLICIES:
        for s in range(3):
            eta = [delay(p, s, eta=e) for e in (0.4, 0.6, 0.8, 1.0, 1.2)]
            if any(b > a for a, b in zip(eta, eta[1:])):
                bad.append(f"{p} seed {s} eta {np.round(eta, 6).tolist()}")
            ns = [delay(p, s, num_faps=n) for n in (5, 10, 15, 20)]
            if any(b < a for a, b in zip(ns, ns[1:])):
                bad.append(f"{p} seed {s} N {np.round(ns, 6).tolist()}")
    ok = not bad
    record(8, ok, f"policies {TREND_POLICIES}, seeds 0-2, {TREND_SLOTS} slots: "
                  f"{'all monotone' if ok else bad}; {time.perf_counter() - t0:.0f}s")
    assert ok


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_09_determinism(record, tmp_path):
    for out in ("a", "b"):
        assert cli.main(["run", "--policy", "frlq", "--seed", "7", "--out", str(tmp_path / out)]) == 0
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
            for n in ("metrics.csv", "rounds.csv", "summary.json")}
    ok = all(same.values())
    record(9, ok, f"byte-identical: {same}")
    assert ok


# -- 10 --------------------------------------------------------------------------------


def single_agent_losses(steps=2000, seed=0):
    cfg = desk(world={"num_faps": 1}, run={"seed": seed})
    world = build_world(cfg.world, seed)
    T = cfg.run.num_slots
    req = generate_requests(world.popularity, T, cfg.world.users_per_fap, seed)
    env = CachingEnv(world, req)
    F = cfg.world.num_contents
    pol = DQNPolicy(1, 2 * F + 1, int(cfg.world.capacity_mb) + 1, cfg.agent, T, seed)
    agent = pol.agents[0]
    while agent.steps < steps:
        env.run_slot(pol)
    return np.array(agent.losses[:steps])


def test_criterion_10_loss_convergence(record):
    losses = single_agent_losses()
    k = losses.size // 10
    first, last = losses[:k].mean(), losses[-k:].mean()
    part1 = first > last
    final = {keep: [federated_run(keep, 32, s)[-1].mean_loss for s in range(3)] for keep in (0.9, 0.8)}
    better = sum(a <= b for a, b in zip(final[0.9], final[0.8]))
    part2 = better >= 2
    identical = [federated_run(0.9, 32, s)[-1].checksum == federated_run(0.8, 32, s)[-1].checksum
                 for s in range(3)]
    ok = part1 and part2
    record(10, ok, f"first/last decile loss {first:.4g}/{last:.4g}; keep 0.9 <= keep 0.8 final loss on "
                   f"{better}/3 seeds (runs identical: {identical})")
    assert ok
