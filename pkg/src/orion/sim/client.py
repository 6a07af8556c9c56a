"""Open-loop clients that prefer their home cluster and fail over on timeout."""

from __future__ import annotations

from ..core import Transaction
from .node import ClientTx


class Client:
    def __init__(self, cid: int, home: int, net, config):
        self.cid = cid
        self.home = home
        self.net = net
        self.config = config
        self.seq = 0
        self.pending: dict = {}  # txid -> [tx, first_sent, cluster, attempt]
        self.replies: dict = {}  # txid -> {(cluster, result): set(replica)}
        self.accepted: dict = {}  # txid -> latency

    def start(self):
        self.net.sim.after(self.cid % max(1, self.config.client_interval), self.submit)

    def submit(self):
        limit = self.config.txs_per_client
        if limit is not None and self.seq >= limit:
            return
        tx = Transaction(self.cid, self.seq, f"k{self.cid}.{self.seq % 16}={self.seq}".encode())
        self.seq += 1
        self.pending[tx.txid] = [tx, self.net.sim.now, self.home, 0]
        self.net.trace_client(self.cid, "submit", txid=tx.txid, cluster=self.home, client_seq=tx.seq)
        self._send(tx, self.home)
        self.net.sim.after(self.config.client_interval, self.submit)

    def _send(self, tx, cluster):
        for k in range(self.config.cluster_sizes[cluster]):
            self.net.client_send(self.cid, cluster, k, ClientTx(tx))
        self.net.sim.after(self.config.client_timeout, self._timeout, tx.txid,
                           self.pending[tx.txid][3])

    def _timeout(self, txid, attempt):
        entry = self.pending.get(txid)
        if entry is None or entry[3] != attempt:
            return
        entry[2] = (entry[2] + 1) % self.config.num_clusters
        entry[3] += 1
        self.net.trace_client(self.cid, "retransmit", txid=txid, cluster=entry[2])
        self._send(entry[0], entry[2])

    def on_reply(self, replica, reply):
        entry = self.pending.get(reply.txid)
        if entry is None:
            return
        voters = self.replies.setdefault(reply.txid, {}).setdefault(
            (replica.cluster, reply.result), set())
        voters.add(replica)
        if len(voters) >= self.config.f(replica.cluster) + 1:
            latency = self.net.sim.now - entry[1]
            del self.pending[reply.txid]
            self.replies.pop(reply.txid, None)
            self.accepted[reply.txid] = latency
            self.net.trace_client(self.cid, "accept", txid=reply.txid, latency=latency,
                                  height=reply.height, cluster=replica.cluster)
