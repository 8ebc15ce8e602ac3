"""Command-line entry point: ``fogcache {run,compare,theorems}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import POLICIES, ConfigError, SimConfig, load
from . import sim

EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _parse_sweep(text: str):
    """``section.key=v1,v2,...`` -> (section, key, [values])."""
    try:
        lhs, rhs = text.split("=", 1)
        section, key = lhs.split(".", 1)
        values = [float(v) if any(c in v for c in ".eE") else int(v) for v in rhs.split(",")]
    except ValueError as e:
        raise ConfigError(f"bad --sweep {text!r}; expected section.key=v1,v2,...") from e
    return section, key, values


def _config(args) -> SimConfig:
    cfg = load(args.config) if args.config else SimConfig()
    run, fed = {}, {}
    if args.seed is not None:
        run["seed"] = args.seed
    if getattr(args, "policy", None):
        run["policy"] = args.policy
    if args.slots is not None:
        run["num_slots"] = args.slots
    if args.keep is not None:
        fed["keep_fraction"] = args.keep
    if args.clusters is not None:
        fed["clusters"] = args.clusters
    return cfg.replace(run=run, fed=fed)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fogcache", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--slots", type=int, help="override run.num_slots")
        sp.add_argument("--keep", type=float, help="fraction of layers uploaded")
        sp.add_argument("--clusters", type=int, help="codebook size per kept layer")
        sp.add_argument("--out", type=Path, default=Path("out"))

    r = sub.add_parser("run", help="simulate one policy and write metrics")
    common(r)
    r.add_argument("--policy", choices=POLICIES)

    c = sub.add_parser("compare", help="run several policies on the same request traces")
    common(c)
    c.add_argument("--policies", default="frlq,dqn,lru,lfu",
                   help="comma-separated policy names")
    c.add_argument("--sweep", help="section.key=v1,v2,... e.g. world.capacity_mb=10,20,40")

    t = sub.add_parser("theorems", help="check the convergence bounds on quadratic testbeds")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--replicas", type=int, default=200)
    t.add_argument("--steps", type=int, default=100, help="local steps per instance")
    t.add_argument("--out", type=Path, default=Path("out"))
    return p


def _run(args) -> int:
    cfg = _config(args)
    res = sim.run_experiment(cfg)
    sim.write_artifacts(cfg, res, args.out)
    s = sim.summary(cfg, res)
    print(f"{s['policy']}: hit_rate={s['hit_rate']} avg_delay_s={s['avg_delay_s']}"
          + (f" uploaded_ratio={s['uploaded_ratio']}" if s["uploaded_ratio"] is not None else ""))
    return 0


def _compare(args) -> int:
    cfg = _config(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    bad = [p for p in policies if p not in POLICIES]
    if bad:
        raise ConfigError(f"unknown policies: {', '.join(bad)}")
    sweep = _parse_sweep(args.sweep) if args.sweep else None
    rows = sim.compare_policies(cfg, policies, sweep)
    sim.write_compare(rows, args.out)
    for r in rows:
        print(f"{r['policy']:12s} {r['param']}={r['value']} hit_rate={r['hit_rate']:.4f} "
              f"avg_delay={r['avg_delay']:.6g}")
    return 0


def _theorems(args) -> int:
    traces = sim.theorem_sweep(args.seed, args.replicas, args.steps)
    sim.write_theorems(traces, args.out)
    failed = 0
    for name, tr in traces:
        r1 = sim.cv.check_theorem1(tr)
        r2 = sim.cv.check_theorem2(tr)
        failed += r1.violations + r2.violations
        print(f"{name:22s} bound1 violations={r1.violations} bound2 violations={r2.violations}")
    return 0 if failed == 0 else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "compare": _compare, "theorems": _theorems}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except sim.InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
