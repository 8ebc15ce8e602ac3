"""Experiment orchestration, metrics and artifact writing."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import convergence as cv
from .agents import CentralizedPolicy, DQNPolicy, LFUPolicy, LRUPolicy
from .config import SimConfig
from .env import CachingEnv, FapSlotLog, Source, build_world, generate_requests
from .federation import FederatedPolicy, uploaded_ratio

log = logging.getLogger(__name__)

SIG = 9  # significant digits in CSV output


class InvariantViolation(RuntimeError):
    pass


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return ""
        return format(float(x), f".{SIG}g")
    return str(x)


def hit_rate(slot_log: FapSlotLog) -> Optional[float]:
    """Fraction of the F-AP's requests served from its own cache; None for an empty slot."""
    if slot_log.requests == 0:
        return None
    return slot_log.count(Source.LOCAL) / slot_log.requests


def avg_request_delay(logs: Sequence[FapSlotLog]) -> float:
    delays = np.concatenate([l.delays for l in logs])
    if delays.size == 0:
        raise ValueError("no requests")
    return float(delays.mean())


def make_policy(cfg: SimConfig, world, name: Optional[str] = None):
    name = name or cfg.run.policy
    N = world.num_faps
    F = world.catalog.num_contents
    state_dim = 2 * F + 1
    slots = int(round(cfg.world.capacity_mb / cfg.world.content_size_mb))
    actions = slots + 1
    T, seed = cfg.run.num_slots, cfg.run.seed
    if name == "lru":
        return LRUPolicy(N, F)
    if name == "lfu":
        return LFUPolicy(N, F)
    if name == "dqn":
        return DQNPolicy(N, state_dim, actions, cfg.agent, T, seed)
    if name == "centralized":
        return CentralizedPolicy(N, state_dim, actions, cfg.agent, T, seed)
    if name in ("frlq", "frl"):
        fed = cfg.fed if name == "frlq" else _uncompressed(cfg.fed)
        return FederatedPolicy(N, state_dim, actions, cfg.agent, T, seed, fed)
    raise ValueError(f"unknown policy {name!r}")


def _uncompressed(fed):
    from dataclasses import replace

    return replace(fed, compressed=False)


@dataclass
class ExperimentResult:
    policy: str
    counts: np.ndarray  # (T, N, 3) local / neighbor / cloud
    delay_sum: np.ndarray  # (T, N)
    reward_sum: np.ndarray  # (T, N)
    warmup: int
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # per agent
    period_hits: list = field(default_factory=list)  # (period, fap, hit_rate)

    @property
    def requests(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    def hit_rate_series(self) -> np.ndarray:
        """(T, N) per-F-AP hit rate."""
        return self.counts[:, :, Source.LOCAL] / self.requests

    def summary_hit_rate(self) -> float:
        c = self.counts[self.warmup:]
        return float(c[:, :, Source.LOCAL].sum() / c.sum())

    def summary_delay(self) -> float:
        return float(self.delay_sum[self.warmup:].sum() / self.requests[self.warmup:].sum())

    def uploaded_ratio(self) -> Optional[float]:
        return uploaded_ratio(self.records) if self.records else None

    def final_loss(self) -> Optional[float]:
        return self.records[-1].mean_loss if self.records else None


def run_experiment(cfg: SimConfig, policy_name: Optional[str] = None) -> ExperimentResult:
    """Simulate ``cfg.run.num_slots`` slots; the request trace depends only on the seed."""
    seed = cfg.run.seed
    world = build_world(cfg.world, seed)
    T = cfg.run.num_slots
    requests = generate_requests(world.popularity, T, cfg.world.users_per_fap, seed)
    policy = make_policy(cfg, world, policy_name)
    env = CachingEnv(world, requests, cfg.run.reward_mode)
    N = world.num_faps
    counts = np.zeros((T, N, 3), dtype=np.int64)
    delay_sum = np.zeros((T, N))
    reward_sum = np.zeros((T, N))
    period_hits = []
    mark = 0
    n_records = 0
    for t in range(T):
        try:
            logs = env.run_slot(policy)
        except AssertionError as e:
            raise InvariantViolation(f"slot {t}: {e}") from e
        for n, l in enumerate(logs):
            counts[t, n] = np.bincount(l.sources, minlength=3)
            delay_sum[t, n] = l.delays.sum()
            reward_sum[t, n] = l.rewards.sum()
        records = getattr(policy, "records", None)
        if records is not None and len(records) > n_records:
            c = counts[mark:t + 1]
            for n in range(N):
                period_hits.append(c[:, n, Source.LOCAL].sum() / c[:, n].sum())
            mark = t + 1
            n_records = len(records)
    losses = [a.losses for a in getattr(policy, "agents", [])]
    return ExperimentResult(
        policy=policy.name,
        counts=counts,
        delay_sum=delay_sum,
        reward_sum=reward_sum,
        warmup=int(T * cfg.run.warmup_fraction),
        records=list(getattr(policy, "records", [])),
        losses=losses,
        period_hits=period_hits,
    )


# --------------------------------------------------------------------------
# Artifacts
# --------------------------------------------------------------------------

METRICS_COLUMNS = ["policy", "t", "fap", "requests", "local", "neighbor", "cloud",
                   "hit_rate", "avg_delay", "cum_reward"]
ROUNDS_COLUMNS = ["period", "client", "slot", "bit_cost", "raw_bits", "ratio", "loss",
                  "hit_rate", "update_norm", "checksum"]
THEOREMS_COLUMNS = ["instance", "label", "t", "delta", "theorem1_lhs", "theorem1_rhs",
                    "theorem2_bound", "theorem1_holds", "theorem2_holds"]


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(x) for x in r])


def metrics_rows(res: ExperimentResult):
    cum = np.cumsum(res.reward_sum, axis=0)
    T, N, _ = res.counts.shape
    req = res.requests
    for t in range(T):
        for n in range(N):
            l, nb, c = res.counts[t, n]
            r = req[t, n]
            yield (res.policy, t, n, r, l, nb, c, l / r if r else np.nan,
                   res.delay_sum[t, n] / r if r else np.nan, cum[t, n])


def rounds_rows(res: ExperimentResult):
    N = res.counts.shape[1]
    for rec in res.records:
        for n in range(len(rec.bit_costs)):
            i = rec.period * N + n
            hr = res.period_hits[i] if i < len(res.period_hits) else np.nan
            yield (rec.period, n, rec.slot, rec.bit_costs[n], rec.raw_bits[n],
                   rec.bit_costs[n] / rec.raw_bits[n], rec.mean_loss, hr,
                   rec.update_norm, rec.checksum)


def summary(cfg: SimConfig, res: ExperimentResult) -> dict:
    def r9(x):
        return None if x is None else float(fmt(x))

    return {
        "config": cfg.to_dict(),
        "policy": res.policy,
        "warmup_slots": res.warmup,
        "hit_rate": r9(res.summary_hit_rate()),
        "avg_delay_s": r9(res.summary_delay()),
        "total_requests": int(res.requests.sum()),
        "periods": len(res.records),
        "uploaded_ratio": r9(res.uploaded_ratio()),
        "final_loss": r9(res.final_loss()),
        "sgd_steps": [len(l) for l in res.losses],
    }


def write_artifacts(cfg: SimConfig, res: ExperimentResult, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, metrics_rows(res))
    _write_csv(out / "rounds.csv", ROUNDS_COLUMNS, rounds_rows(res))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary(cfg, res), fh, indent=2, sort_keys=True)
        fh.write("\n")


def compare_policies(cfg: SimConfig, policies: Sequence[str], sweep: Optional[tuple] = None):
    """Hit rate and delay per policy (and per sweep point) on common request traces.

    ``sweep`` is ``(section, key, values)``, e.g. ``("world", "capacity_mb", [10, 20])``.
    """
    points = [(None, None)] if sweep is None else [(sweep[1], v) for v in sweep[2]]
    rows = []
    for key, value in points:
        c = cfg if key is None else cfg.replace(**{sweep[0]: {key: value}})
        for p in policies:
            res = run_experiment(c, p)
            rows.append({
                "policy": p,
                "param": key or "",
                "value": value if value is not None else "",
                "hit_rate": res.summary_hit_rate(),
                "avg_delay": res.summary_delay(),
            })
            log.info("%s %s=%s hit=%.4f", p, key, value, rows[-1]["hit_rate"])
    return rows


def write_compare(rows, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "compare.csv", ["policy", "param", "value", "hit_rate", "avg_delay"],
               ([r["policy"], r["param"], r["value"], r["hit_rate"], r["avg_delay"]] for r in rows))


def theorem_sweep(seed: int = 0, replicas: int = 200, periods_steps: int = 100,
                  mutation: bool = True):
    """Traces for a grid of heterogeneous instances plus near-IID probes of the H term."""
    out = []
    i = 0
    for X in (1, 2, 5, 10):
        for N in (2, 5, 10):
            aniso = (i % 2) == 1
            clients = cv.random_instance([seed, 31, i], N, anisotropic=aniso,
                                         beta=3.0 if aniso else 1.0)
            mu, beta = cv.curvature_bounds(clients)
            sched = cv.standard_schedule(mu, beta, X)
            tr = cv.run_fedsgd(clients, X, max(1, periods_steps // X), sched, seed=seed,
                               replicas=replicas, theta0=np.zeros(clients[0].dim))
            out.append((f"X{X}-N{N}-{'aniso' if aniso else 'iso'}", tr))
            i += 1
    if mutation:
        for N in (2, 5, 10):
            clients = cv.random_instance([seed, 37, N], N, spread=0.05, sigma=1.0)
            mu, beta = cv.curvature_bounds(clients)
            tr = cv.run_fedsgd(clients, 1, 50, cv.standard_schedule(mu, beta, 1), seed=seed,
                               replicas=replicas)
            out.append((f"near-iid-N{N}", tr))
    return out


def theorem_rows(traces):
    for name, tr in traces:
        r1 = cv.check_theorem1(tr)
        r2 = cv.check_theorem2(tr)
        for j, (t, d, lhs, rhs, b2) in enumerate(tr.rows()):
            yield (name, tr.label, t, d, lhs, rhs, b2, r1.holds[j], r2.holds[j])


def write_theorems(traces, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "theorems.csv", THEOREMS_COLUMNS, theorem_rows(traces))
