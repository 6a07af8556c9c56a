"""Command line entry point: run, check, sweep, schedule and replay."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..chain import block_record, parse_block, replay
from ..core import hash_bytes
from ..errors import OrionError
from ..roles import RoleSchedule
from .checks import check_liveness, check_safety, check_steps
from .config import ScenarioConfig
from .engine import Trace
from .runner import run_scenario


def _int_list(text: str) -> list:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _load(path) -> ScenarioConfig:
    return ScenarioConfig.load(path) if path else ScenarioConfig()


def cmd_run(args) -> int:
    config = _load(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.views is not None:
        changes["max_views"] = args.views
    config = config.with_(**changes)
    config.validate()
    result = run_scenario(config)
    out = Path(args.out)
    (out / "chains").mkdir(parents=True, exist_ok=True)
    result.trace.write(out / "trace.jsonl")
    (out / "scenario.json").write_text(config.dumps() + "\n")
    healthy = result.healthy()
    blocks = {}
    for rid, replica in sorted(healthy.items()):
        (out / "chains" / f"{rid}.jsonl").write_text(
            "".join(line + "\n" for line in replica.chain.export()))
        for d in replica.chain.blocks.digests():
            blocks.setdefault(d, replica.chain.blocks.block(d))
    (out / "blocks.jsonl").write_text(
        "".join(block_record(b) + "\n" for _, b in sorted(blocks.items())))
    metrics = {k: v for k, v in result.metrics.items() if k != "latency_samples"}
    safety = check_safety(result.trace.records, {r: x.chain for r, x in healthy.items()})
    liveness = check_liveness(result.trace.records, config)
    metrics["safety"] = safety.ok
    metrics["liveness"] = liveness.ok
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"views={config.max_views} seed={config.seed} "
          f"superblocks={metrics['committed_superblocks']} txs={metrics['committed_txs']} "
          f"safety={'pass' if safety else 'FAIL'} liveness={'pass' if liveness else 'FAIL'}")
    for v in safety.violations:
        print("  safety:", json.dumps(v))
    for v in liveness.violations:
        print("  liveness:", json.dumps({k: x for k, x in v.items() if k != "records"}))
    print(f"trace digest {hash_bytes(result.trace.to_bytes()).hex()}")
    return 0 if safety else 1


def cmd_check(args) -> int:
    records = Trace.read(args.trace)
    safety = check_safety(records)
    steps = check_steps(records)
    print(f"safety: {'pass' if safety else 'FAIL'}")
    for v in safety.violations:
        print("  ", json.dumps(v))
    print(f"steps: {'pass' if steps else 'FAIL'} ({steps.details['commits']} commits)")
    ok = safety.ok
    if args.scenario:
        liveness = check_liveness(records, ScenarioConfig.load(args.scenario))
        print(f"liveness: {'pass' if liveness else 'FAIL'} {json.dumps(liveness.details)}")
        ok = ok and liveness.ok
    return 0 if ok else 1


def sweep_counts(base: ScenarioConfig, dimension: str, values, fixed: int) -> list:
    counts = []
    for v in values:
        if dimension == "clusters":
            config = base.with_(cluster_sizes=(fixed,) * v, clients=v)
        else:
            config = base.with_(cluster_sizes=(v,) * fixed)
        counts.append(run_scenario(config).metrics["messages_per_commit"])
    return counts


def fixed_latency(config: ScenarioConfig) -> ScenarioConfig:
    """Constant link delays, so message counts depend only on topology."""
    mid = lambda r: ((r[0] + r[1]) // 2,) * 2  # noqa: E731
    return config.with_(intra_latency=mid(config.intra_latency),
                        inter_latency=mid(config.inter_latency),
                        client_latency=mid(config.client_latency), gst=0)


def cmd_sweep(args) -> int:
    base = fixed_latency(_load(args.scenario).with_(max_views=args.views))
    values = _int_list(args.values)
    counts = sweep_counts(base, args.dimension, values, args.fixed)
    for v, cnt in zip(values, counts):
        print(f"{args.dimension}={v} messages_per_commit={cnt:.1f}")
    if args.dimension == "replicas":
        from .checks import fit_linear
        slope, intercept, r2 = fit_linear(values, counts)
        print(f"linear fit: slope={slope:.2f} intercept={intercept:.2f} r2={r2:.5f}")
    else:
        from .checks import fit_quadratic
        a, b, c = fit_quadratic(values, counts)
        print(f"quadratic fit: a={a:.3f} b={b:.3f} c={c:.3f}")
    return 0


def cmd_schedule(args) -> int:
    schedule = RoleSchedule(_int_list(args.clusters))
    for row in schedule.table(args.views, args.local_view):
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_replay(args) -> int:
    with open(args.blocks) as fh:
        blocks = [parse_block(line) for line in fh if line.strip()]
    with open(args.chain) as fh:
        state = replay([line for line in fh if line.strip()], blocks, args.clusters)
    print(hash_bytes(state).hex())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orion", description="Simulate and check clustered BFT runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and write trace, chains and metrics")
    p.add_argument("--scenario", help="scenario JSON file (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="check a trace file")
    p.add_argument("--trace", required=True)
    p.add_argument("--scenario", help="scenario used for the run, enables the liveness check")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="message complexity over a scaled dimension")
    p.add_argument("--dimension", choices=("clusters", "replicas"), required=True)
    p.add_argument("--values", required=True, help="comma separated, e.g. 3,5,7")
    p.add_argument("--fixed", type=int, default=None,
                   help="replicas per cluster (clusters sweep) or cluster count (replicas sweep)")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--scenario")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("schedule", help="print the role table")
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--clusters", default="4,4,4", help="cluster sizes, e.g. 4,4,4")
    p.add_argument("--local-view", type=int, default=0)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("replay", help="re-execute an exported chain and print the state digest")
    p.add_argument("--chain", required=True)
    p.add_argument("--blocks", required=True)
    p.add_argument("--clusters", type=int, default=3)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "fixed", 0) is None:
        args.fixed = 4 if args.dimension == "clusters" else 3
    try:
        return args.func(args)
    except OrionError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
