"""A simulated replica: the protocol components wired to the event engine."""

from __future__ import annotations

from ..chain import ChainState, DurabilityTracker
from ..core import ReplicaId, Transaction
from ..dissemination import BlockFetch, BlockFetchReply, DisseminationMsg, Disseminator
from ..global_consensus import GlobalConsensus
from ..local import LocalConsensus
from .faults import ReplicaFaults, applies_to


class ClientTx:
    """A client submission delivered to a replica."""

    kind = "ClientTx"
    layer = "client"
    view = 0

    def __init__(self, tx: Transaction):
        self.tx = tx


class Replica:
    def __init__(self, net, rid: ReplicaId, params, schedule, registry, behaviors=()):
        self.net = net
        self.me = rid
        self.params = params
        self.schedule = schedule
        self.registry = registry
        self.crashed = False
        self._timers: dict = {}
        self._timer_seq = 0
        self.client_txids: set = set()
        self.faults = ReplicaFaults(self, [b for b in behaviors if applies_to(b, rid)])

        self.chain = ChainState(params.num_clusters, params.F, params.max_blocks,
                                durability=DurabilityTracker(params.cluster_sizes))
        self.diss = Disseminator(self, self.chain, on_store=self._on_store)
        self.glob = GlobalConsensus(self, self.chain, claims_for=self.diss.claims_for,
                                    absorb_claims=self.diss.absorb_claims,
                                    reply_filter=self._reply_filter,
                                    on_replies=self._on_replies)
        if self.faults:
            self.glob.sign_everything = self.faults.sign_everything
        self.local = LocalConsensus(self, self.chain, gview=lambda: self.glob.view,
                                    on_lock=self._on_lock)

    # -- Context surface -------------------------------------------------------------

    def now(self) -> int:
        return self.net.sim.now

    def send(self, dst: ReplicaId, msg):
        if self.crashed:
            return
        if self.faults:
            for dst2, msg2, delay in self.faults.outbound(dst, msg):
                self.net.send(self.me, dst2, msg2, delay)
        else:
            self.net.send(self.me, dst, msg)

    def set_timer(self, key, delay: int):
        self._timer_seq += 1
        token = self._timer_seq
        self._timers[key] = token
        self.net.sim.after(delay, self._fire, key, token)

    def cancel_timer(self, key):
        self._timers.pop(key, None)

    def trace(self, kind: str, **fields):
        self.net.sim.trace.add(self.net.sim.now, self.me, kind, fields)

    # -- role queries used by fault behaviors -------------------------------------------

    @property
    def gview(self) -> int:
        return self.glob.view

    def holds(self, role: str) -> bool:
        c, gv = self.me.cluster, self.glob.view
        if role == "representative":
            return self.schedule.representative(c, gv) == self.me
        if role == "global_leader":
            return self.schedule.global_leader_replica(gv) == self.me
        lv = self.local.local_view
        if role == "local_leader":
            return self.local.leader(lv) == self.me
        if role == "disseminator":
            return self.schedule.disseminator(c, lv, self.local.role_gview(lv)) == self.me
        return False

    # -- lifecycle ---------------------------------------------------------------------

    def start(self):
        if self.crashed:
            return
        self.glob.start()
        self.local.start()

    def crash(self):
        self.crashed = True
        self._timers.clear()
        self.trace("crash", layer="fault")

    def _fire(self, key, token):
        if self.crashed or self._timers.get(key) != token:
            return
        del self._timers[key]
        if key[0] in ("lview", "propose"):
            self.local.on_timer(key)
        else:
            self.glob.on_timer(key)

    def deliver(self, src: ReplicaId, msg):
        if self.crashed:
            return
        if isinstance(msg, ClientTx):
            self.client_txids.add(msg.tx.txid)
            self.local.add_transaction(msg.tx)
            return
        if isinstance(msg, (DisseminationMsg, BlockFetch, BlockFetchReply)):
            self.diss.handle(src, msg)
            return
        if msg.layer == "local":
            self.local.handle(src, msg)
            return
        self.glob.handle(src, msg)

    # -- glue between components ------------------------------------------------------------

    def _on_lock(self, block, cert):
        self.diss.on_lock(block, cert, self.local.role_gview(cert.local_view))
        self.glob.on_new_data()

    def _on_store(self, block, cert):
        if block.origin == self.me.cluster:
            self.local.learn_block(block, cert)
        self.glob.on_new_data()

    def _reply_filter(self, block, tx) -> bool:
        return tx.txid in self.client_txids or block.origin == self.me.cluster

    def _on_replies(self, replies):
        for reply in replies:
            self.net.reply(self.me, reply)
