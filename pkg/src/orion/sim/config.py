"""Scenario files: a versioned JSON document describing one simulated run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

from ..core import ReplicaId
from ..errors import BudgetExceeded, ConfigInvalid
from ..params import ProtocolParams

SCHEMA_VERSION = 1

FAULT_KINDS = ("crash_replica", "crash_cluster", "omit", "equivocate", "stale_certificate", "delay")
ROLES = ("local_leader", "representative", "disseminator", "global_leader")
BYZANTINE_KINDS = ("omit", "equivocate", "stale_certificate", "delay")


@dataclass(frozen=True)
class FaultBehavior:
    """One adversarial behavior and where it applies.

    ``target`` pins a replica; otherwise ``role`` (optionally narrowed to
    ``cluster``) selects whichever replica holds the role. ``views`` and
    ``time`` are inclusive windows; ``None`` bounds are open.
    """

    kind: str
    target: Optional[str] = None
    role: Optional[str] = None
    cluster: Optional[int] = None
    views: tuple = (None, None)
    time: tuple = (None, None)
    amount: int = 0
    kinds: tuple = ()  # restrict to these message kinds
    sign_all: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "FaultBehavior":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigInvalid(f"unknown fault fields {sorted(unknown)}")
        d = dict(d)
        for key in ("views", "time"):
            if key in d:
                d[key] = tuple(d[key])
        if "kinds" in d:
            d["kinds"] = tuple(d["kinds"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["views"], out["time"], out["kinds"] = list(self.views), list(self.time), list(self.kinds)
        return out

    @property
    def replica(self) -> Optional[ReplicaId]:
        return ReplicaId.parse(self.target) if self.target else None

    @property
    def start_time(self) -> int:
        return self.time[0] or 0


@dataclass(frozen=True)
class ScenarioConfig:
    cluster_sizes: tuple = (4, 4, 4)
    seed: int = 0
    max_views: int = 30
    max_time: Optional[int] = None
    gst: int = 0
    intra_latency: tuple = (1, 5)
    inter_latency: tuple = (500, 1500)
    client_latency: tuple = (1, 5)
    pre_gst_extra: tuple = (0, 5000)
    block_size: int = 400
    k_max: Optional[int] = None
    block_interval: int = 4000
    local_timeout: int = 6000
    global_timeout: int = 12000
    fetch_timeout: int = 4000
    max_backoff: int = 3
    clients: int = 3
    client_interval: int = 1000
    client_timeout: int = 60000
    txs_per_client: Optional[int] = None
    faults: tuple = ()
    signature: str = "sim"
    beyond_model: bool = False
    schema_version: int = SCHEMA_VERSION

    # -- derived -----------------------------------------------------------------

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def F(self) -> int:
        return (self.num_clusters - 1) // 2

    def f(self, cluster: int) -> int:
        return (self.cluster_sizes[cluster] - 1) // 3

    def params(self) -> ProtocolParams:
        return ProtocolParams(self.cluster_sizes, self.block_size, self.k_max, self.block_interval,
                              self.local_timeout, self.global_timeout, self.fetch_timeout,
                              self.max_backoff)

    def crashed_clusters(self) -> dict:
        return {b.cluster: b.start_time for b in self.faults if b.kind == "crash_cluster"}

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    # -- (de)serialization -----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown scenario fields {sorted(unknown)}")
        for key in ("cluster_sizes", "intra_latency", "inter_latency", "client_latency",
                    "pre_gst_extra"):
            if key in d:
                d[key] = tuple(d[key])
        d["faults"] = tuple(FaultBehavior.from_dict(b) if isinstance(b, dict) else b
                            for b in d.get("faults", ()))
        try:
            config = cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None
        config.validate()
        return config

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        out["faults"] = [b.to_dict() for b in self.faults]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- validation --------------------------------------------------------------------

    def validate(self) -> None:
        sizes = self.cluster_sizes
        if not sizes or any(not isinstance(n, int) or n < 1 for n in sizes):
            raise ConfigInvalid("cluster_sizes must be positive integers")
        if len(sizes) % 2 != 1:
            raise ConfigInvalid(f"number of clusters must be 2F+1, got {len(sizes)}")
        for i, n in enumerate(sizes):
            if n % 3 != 1:
                raise ConfigInvalid(f"cluster {i} has {n} replicas; sizes must be 3f+1")
        for name in ("intra_latency", "inter_latency", "client_latency", "pre_gst_extra"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigInvalid(f"{name} must be an increasing non-negative range")
        if self.max_views < 1 or self.block_size < 1:
            raise ConfigInvalid("max_views and block_size must be positive")
        for name in ("block_interval", "local_timeout", "global_timeout", "fetch_timeout",
                     "client_interval", "client_timeout"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be positive")
        if self.signature not in ("sim", "ed25519"):
            raise ConfigInvalid(f"unknown signature scheme {self.signature!r}")
        for b in self.faults:
            if b.kind not in FAULT_KINDS:
                raise ConfigInvalid(f"unknown fault kind {b.kind!r}")
            if b.role is not None and b.role not in ROLES:
                raise ConfigInvalid(f"unknown role {b.role!r}")
            if b.kind == "crash_cluster" and b.cluster is None:
                raise ConfigInvalid("crash_cluster needs a cluster")
            if b.kind == "crash_replica" and b.target is None:
                raise ConfigInvalid("crash_replica needs a target")
            if b.cluster is not None and not 0 <= b.cluster < len(sizes):
                raise ConfigInvalid(f"fault cluster {b.cluster} out of range")
            if b.target is not None:
                rid = b.replica
                if not (0 <= rid.cluster < len(sizes) and 0 <= rid.index < sizes[rid.cluster]):
                    raise ConfigInvalid(f"fault target {b.target} does not exist")
        check_budget(self)


def check_budget(config: ScenarioConfig) -> None:
    """Refuse fault plans beyond the tolerated bounds unless flagged beyond-model.

    A role-based behavior occupies one replica per affected cluster at any
    moment (the current role holder), so it costs one fault per cluster.
    """
    if config.beyond_model:
        return
    crashed = set(config.crashed_clusters())
    if len(crashed) > config.F:
        raise BudgetExceeded(f"{len(crashed)} crashed clusters, tolerance is {config.F}")
    per_cluster = {c: set() for c in range(config.num_clusters)}
    for i, b in enumerate(config.faults):
        if b.kind == "crash_cluster":
            continue
        if b.target is not None:
            per_cluster[b.replica.cluster].add(("replica", b.target))
        else:
            clusters = [b.cluster] if b.cluster is not None else range(config.num_clusters)
            for c in clusters:
                per_cluster[c].add(("behavior", i))
    for c, occupants in per_cluster.items():
        if c in crashed:
            continue
        if len(occupants) > config.f(c):
            raise BudgetExceeded(f"cluster {c}: {len(occupants)} faulty replicas, tolerance is {config.f(c)}")
