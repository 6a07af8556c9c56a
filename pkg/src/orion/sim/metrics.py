"""Run metrics, derived from trace records only."""

from __future__ import annotations

from collections import Counter

# layers counted toward the per-commit message complexity
COUNTED_LAYERS = ("local", "cosign", "global", "dissem")


def compute_metrics(records, config=None) -> dict:
    by_layer = Counter()
    heights: dict = {}
    decided_views = set()
    steps = []
    latencies = []
    submitted = 0
    end = 0
    for r in records:
        end = max(end, r["t"])
        ev = r["ev"]
        if ev == "send":
            by_layer[r["layer"]] += 1
        elif ev == "commit":
            heights[r["replica"]] = max(heights.get(r["replica"], 0), r["height"])
        elif ev == "certificate" and r.get("phase") == "pcom":
            decided_views.add(r["view"])
            steps.append(r["step"])
        elif ev == "accept":
            latencies.append(r["latency"])
        elif ev == "submit":
            submitted += 1
    decides = len(decided_views)
    counted = sum(by_layer[layer] for layer in COUNTED_LAYERS)
    seconds = end / 1_000_000 if end else 0
    return {
        "end_time": end,
        "committed_superblocks": max(heights.values(), default=0),
        "decided_views": sorted(decided_views),
        "submitted_txs": submitted,
        "committed_txs": len(latencies),
        "throughput": len(latencies) / seconds if seconds else 0.0,
        "latency_mean": sum(latencies) / len(latencies) if latencies else None,
        "latency_samples": latencies,
        "messages_by_layer": dict(sorted(by_layer.items())),
        "messages_per_commit": counted / decides if decides else None,
        "steps_per_commit": steps,
    }


def views_to_recovery(metrics: dict, fault_end_view: int):
    """Global views between the end of a fault window and the next decision."""
    later = [v for v in metrics["decided_views"] if v > fault_end_view]
    return later[0] - fault_end_view if later else None
