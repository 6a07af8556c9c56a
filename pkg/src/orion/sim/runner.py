"""Building and running one scenario end to end."""

from __future__ import annotations

from dataclasses import dataclass

from ..core import KeyRegistry, ReplicaId
from ..roles import RoleSchedule
from .client import Client
from .config import ScenarioConfig
from .engine import Simulator, Trace
from .metrics import compute_metrics
from .node import Replica


class Network:
    """Message transport with per-link latency, GST and crash handling."""

    def __init__(self, sim: Simulator, config: ScenarioConfig):
        self.sim = sim
        self.config = config
        self.replicas: dict = {}
        self.clients: dict = {}

    def _sample(self, lo_hi) -> int:
        lo, hi = lo_hi
        delay = self.sim.rng.randint(lo, hi)
        if self.sim.now < self.config.gst:
            delay += self.sim.rng.randint(*self.config.pre_gst_extra)
        return delay

    def _trace_send(self, src, dst, msg):
        self.sim.trace.add(self.sim.now, src, "send", {
            "dst": str(dst), "kind": msg.kind, "layer": msg.layer,
            "view": getattr(msg, "view", 0)})

    def send(self, src: ReplicaId, dst: ReplicaId, msg, extra: int = 0):
        self._trace_send(src, dst, msg)
        if src == dst:
            self.sim.after(0, self._deliver, src, dst, msg)
            return
        same = src.cluster == dst.cluster
        delay = self._sample(self.config.intra_latency if same else self.config.inter_latency)
        self.sim.after(delay + extra, self._deliver, src, dst, msg)

    def _deliver(self, src, dst, msg):
        replica = self.replicas.get(dst)
        if replica is not None and not replica.crashed:
            replica.deliver(src, msg)

    def client_send(self, cid: int, cluster: int, index: int, msg):
        dst = ReplicaId(cluster, index)
        self.sim.trace.add(self.sim.now, f"c{cid}", "send", {
            "dst": str(dst), "kind": msg.kind, "layer": msg.layer, "view": 0})
        client = self.clients[cid]
        lat = self.config.client_latency if cluster == client.home else self.config.inter_latency
        self.sim.after(self._sample(lat), self._deliver, None, dst, msg)

    def reply(self, replica: ReplicaId, reply):
        client = self.clients.get(reply.client)
        if client is None:
            return
        self.sim.trace.add(self.sim.now, replica, "send", {
            "dst": f"c{reply.client}", "kind": "ClientReply", "layer": "client", "view": 0})
        lat = self.config.client_latency if replica.cluster == client.home else self.config.inter_latency
        self.sim.after(self._sample(lat), client.on_reply, replica, reply)

    def trace_client(self, cid: int, ev: str, **fields):
        self.sim.trace.add(self.sim.now, f"c{cid}", ev, fields)


@dataclass
class RunResult:
    config: ScenarioConfig
    trace: Trace
    metrics: dict
    replicas: dict  # ReplicaId -> Replica

    @property
    def chains(self) -> dict:
        return {rid: r.chain for rid, r in self.replicas.items()}

    def healthy(self) -> dict:
        """Replicas that never crashed and had no Byzantine behavior attached."""
        return {rid: r for rid, r in self.replicas.items() if not r.crashed and not r.faults}


def default_max_time(config: ScenarioConfig) -> int:
    """Enough simulated time for every view to run into a fully backed-off timeout."""
    return config.gst + (config.max_views + 1) * config.global_timeout * 2 ** config.max_backoff


def build(config: ScenarioConfig):
    config.validate()
    sim = Simulator(config.seed)
    net = Network(sim, config)
    params = config.params()
    schedule = RoleSchedule(config.cluster_sizes)
    registry = KeyRegistry(config.cluster_sizes, scheme=config.signature, seed=f"orion-{config.seed}")
    for rid in registry.replicas():
        net.replicas[rid] = Replica(net, rid, params, schedule, registry, config.faults)
    for cid in range(config.clients):
        net.clients[cid] = Client(cid, cid % config.num_clusters, net, config)
    for b in config.faults:
        if b.kind == "crash_cluster":
            for rid in registry.replicas(b.cluster):
                sim.at(b.start_time, net.replicas[rid].crash)
        elif b.kind == "crash_replica":
            sim.at(b.start_time, net.replicas[b.replica].crash)
    return sim, net


def run_scenario(config: ScenarioConfig) -> RunResult:
    sim, net = build(config)
    for rid in sorted(net.replicas):
        sim.at(0, net.replicas[rid].start)
    for cid in sorted(net.clients):
        net.clients[cid].start()
    live = [r for r in net.replicas.values()]

    def done() -> bool:
        return all(r.crashed or r.glob.view > config.max_views for r in live)

    until = config.max_time if config.max_time is not None else default_max_time(config)
    sim.run(until, done)
    sim.trace.add(sim.now, None, "end", {"views": config.max_views})
    result = RunResult(config, sim.trace, {}, net.replicas)
    result.metrics = compute_metrics(sim.trace.records, config)
    return result
