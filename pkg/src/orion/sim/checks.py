"""Safety, liveness, step-count and complexity checks over traces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Verdict:
    ok: bool
    violations: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


def check_safety(records, chains=None) -> Verdict:
    """Agreement and exactly-once properties.

    ``chains`` maps replica id to ChainState for replicas that are expected
    to be correct; without it only trace-level checks run.
    """
    violations = []
    by_height: dict = {}
    locks: dict = {}
    certified = {"prep": set(), "pcom": set()}
    prepared, commits = [], []
    for r in records:
        ev = r["ev"]
        if ev == "commit":
            by_height.setdefault(r["height"], {}).setdefault(r["sb"], []).append(r["seq"])
            commits.append(r)
        elif ev == "lock" and r.get("layer") == "local":
            cluster = r["replica"].split(".")[0]
            locks.setdefault((cluster, r["view"]), {}).setdefault(r["block"], []).append(r["seq"])
        elif ev == "certificate":
            certified[r["phase"]].add(r["sb"])
        elif ev == "prepared":
            prepared.append(r)
    for height, digests in sorted(by_height.items()):
        if len(digests) > 1:
            violations.append({"rule": "single decide per height", "height": height,
                               "records": sorted(s for seqs in digests.values() for s in seqs)})
    for (cluster, view), blocks in sorted(locks.items()):
        if len(blocks) > 1:
            violations.append({"rule": "single lock per local view", "cluster": cluster,
                               "view": view, "records": sorted(s for v in blocks.values() for s in v)})
    for r in commits:
        # ancestors executed on the way are covered by the descendant's certificate
        if r["cert_sb"] not in certified["pcom"]:
            violations.append({"rule": "commit without certificate", "records": [r["seq"]]})
    for r in prepared:
        if r["preph"] not in certified["prep"]:
            violations.append({"rule": "prepared without certificate", "records": [r["seq"]]})
    if chains:
        violations.extend(_chain_violations(chains))
    return Verdict(not violations, violations)


def _chain_violations(chains) -> list:
    out = []
    items = sorted(chains.items())
    for i, (rid_a, a) in enumerate(items):
        if len(set(a.exec_log)) != len(a.exec_log):
            out.append({"rule": "exactly-once execution", "replica": str(rid_a)})
        for rid_b, b in items[i + 1:]:
            common = min(len(a.chain), len(b.chain))
            for h in range(common):
                if a.chain[h].digest != b.chain[h].digest:
                    out.append({"rule": "prefix agreement", "replicas": [str(rid_a), str(rid_b)],
                                "height": h})
                    break
    return out


def check_liveness(records, config, bound: int = None) -> Verdict:
    """Heights grow after GST and every early enough submission is answered."""
    if bound is None:
        bound = config.client_timeout + 4 * config.global_timeout
    end = max((r["t"] for r in records), default=0)
    after_gst = [r for r in records if r["ev"] == "commit" and r["t"] >= config.gst]
    violations = []
    if not after_gst:
        violations.append({"rule": "no commit after GST"})
    accepted = {r["txid"] for r in records if r["ev"] == "accept"}
    late = [r for r in records if r["ev"] == "submit" and r["t"] + bound <= end
            and r["txid"] not in accepted]
    if late:
        violations.append({"rule": "transaction not committed within bound", "count": len(late),
                           "records": [r["seq"] for r in late[:20]]})
    heights = [r["height"] for r in after_gst]
    return Verdict(not violations, violations,
                   {"commits_after_gst": len(after_gst), "max_height": max(heights, default=0)})


def check_steps(records, expected: int = 6) -> Verdict:
    steps = [(r["view"], r["step"]) for r in records
             if r["ev"] == "certificate" and r.get("phase") == "pcom"]
    bad = [{"view": v, "steps": s} for v, s in steps if s != expected]
    return Verdict(bool(steps) and not bad, bad, {"commits": len(steps)})


def fit_linear(xs, ys) -> tuple:
    """Least-squares line; returns (slope, intercept, r_squared)."""
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / total if total else 1.0
    return float(slope), float(intercept), r2


def fit_quadratic(xs, ys) -> tuple:
    a, b, c = np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 2)
    return float(a), float(b), float(c)


def check_complexity(n_values, n_counts, c_values, c_counts, min_r2: float = 0.99) -> Verdict:
    """Linear growth in cluster size and super-linear (quadratic) growth in cluster count."""
    slope, intercept, r2 = fit_linear(n_values, n_counts)
    a, b, c = fit_quadratic(c_values, c_counts)
    per_cluster = [cnt / cv for cnt, cv in zip(c_counts, c_values)]
    violations = []
    if slope <= 0 or r2 < min_r2:
        violations.append({"rule": "linear in n", "slope": slope, "r2": r2})
    if a <= 0:
        violations.append({"rule": "quadratic in c", "a": a})
    if any(q <= p for p, q in zip(per_cluster, per_cluster[1:])):
        violations.append({"rule": "per-cluster cost grows with c", "per_cluster": per_cluster})
    details = {"linear_n": {"slope": slope, "intercept": intercept, "r2": r2},
               "quadratic_c": {"a": a, "b": b, "c": c}, "per_cluster_c": per_cluster}
    return Verdict(not violations, violations, details)
