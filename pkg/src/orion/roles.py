"""Deterministic role assignment and rotation schedule.

Representatives follow a mixed-radix schedule: over ``prod(n_i)`` consecutive
global views every combination of one replica per cluster is the global group
exactly once. That is what guarantees the rotation eventually lands on a
configuration whose non-crashed representatives are all healthy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import ReplicaId


@dataclass(frozen=True)
class RoleSchedule:
    cluster_sizes: tuple

    def __init__(self, cluster_sizes: Sequence[int]):
        object.__setattr__(self, "cluster_sizes", tuple(cluster_sizes))

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def period(self) -> int:
        return math.prod(self.cluster_sizes)

    def representative(self, cluster: int, gview: int) -> ReplicaId:
        radix = math.prod(self.cluster_sizes[:cluster])
        return ReplicaId(cluster, (gview // radix) % self.cluster_sizes[cluster])

    def representatives(self, gview: int) -> tuple:
        return tuple(self.representative(c, gview) for c in range(self.num_clusters))

    def global_leader(self, gview: int) -> int:
        return gview % self.num_clusters

    def global_leader_replica(self, gview: int) -> ReplicaId:
        return self.representative(self.global_leader(gview), gview)

    def local_leader(self, cluster: int, lview: int, gview: int) -> ReplicaId:
        n = self.cluster_sizes[cluster]
        index = lview % n
        if n > 1 and index == self.representative(cluster, gview).index:
            index = (lview + 1) % n
        return ReplicaId(cluster, index)

    def disseminator(self, cluster: int, lview: int, gview: int) -> ReplicaId:
        n = self.cluster_sizes[cluster]
        taken = {self.local_leader(cluster, lview, gview).index,
                 self.representative(cluster, gview).index}
        for step in range(2, n + 2):
            index = (lview + step) % n
            if index not in taken:
                return ReplicaId(cluster, index)
        # fewer than three replicas: share a role
        return ReplicaId(cluster, (lview + 2) % n)

    def targets(self, cluster: int, count: int, rotation: int) -> list:
        """``count`` deterministic, rotating recipients within ``cluster``."""
        n = self.cluster_sizes[cluster]
        return [ReplicaId(cluster, (rotation + t) % n) for t in range(min(count, n))]

    def table(self, views: int, lview: int = 0) -> list:
        rows = []
        for v in range(views):
            rows.append({
                "view": v,
                "global_leader": self.global_leader(v),
                "representatives": [str(r) for r in self.representatives(v)],
                "local_leaders": [str(self.local_leader(c, lview + v, v))
                                  for c in range(self.num_clusters)],
                "disseminators": [str(self.disseminator(c, lview + v, v))
                                  for c in range(self.num_clusters)],
            })
        return rows


def backoff_timeout(base: int, failures: int, cap: int = None) -> int:
    """Timer length after ``failures`` consecutive views without progress.

    ``cap`` bounds the exponent so a long faulty stretch cannot push timers
    out indefinitely.
    """
    if cap is not None:
        failures = min(failures, cap)
    return base * (2 ** failures)


def first_healthy_view(schedule: RoleSchedule, faulty: set, crashed: set,
                       start: int = 0) -> int:
    """First global view >= ``start`` whose non-crashed representatives are all healthy.

    ``faulty`` holds ReplicaIds; ``crashed`` holds cluster indices. Returns -1
    when no such view exists within one rotation period.
    """
    for v in range(start, start + schedule.period):
        reps = schedule.representatives(v)
        if all(r not in faulty for r in reps if r.cluster not in crashed):
            return v
    return -1
