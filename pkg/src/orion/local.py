"""HotStuff-based ordering of client transactions inside one cluster.

One block per local view. The leader collects new-view messages, proposes,
and drives prepare / pre-commit / commit voting. The commit quorum yields a
LockCertificate; the decide phase is not run locally because execution waits
for the global protocol.

A proposal either re-proposes the highest prepared block (when that block has
no lock certificate yet) or creates a new block whose parent is it. Locked
blocks therefore form a parent-linked chain per cluster.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .chain import ChainState
from .core import (
    Block,
    Digest,
    LockCertificate,
    PartialSignature,
    QuorumCert,
    ReplicaId,
    Transaction,
    combine_cluster,
    genesis_block,
    sign_partial,
    verify_partial,
    vote_payload,
)
from .errors import InsufficientNewViews, InsufficientQuorum, MixedPayload, NotLeader
from .params import Context
from .roles import backoff_timeout

PREPARE, PRECOMMIT, COMMIT = "prepare", "precommit", "commit"
_NEXT_PHASE = {PREPARE: PRECOMMIT, PRECOMMIT: COMMIT}


@dataclass(frozen=True)
class NewViewL:
    view: int
    prepared: QuorumCert
    kind = "NewViewL"
    layer = "local"


@dataclass(frozen=True)
class ProposeL:
    view: int
    block: Block
    justify: QuorumCert
    kind = "ProposeL"
    layer = "local"


@dataclass(frozen=True)
class VoteL:
    phase: str
    view: int
    block: Digest
    partial: PartialSignature
    kind = "VoteL"
    layer = "local"


@dataclass(frozen=True)
class QCertL:
    qc: QuorumCert
    kind = "QCertL"
    layer = "local"

    @property
    def view(self):
        return self.qc.view


@dataclass(frozen=True)
class LockL:
    cert: LockCertificate
    block: Optional[Block]
    kind = "LockL"
    layer = "local"

    @property
    def view(self):
        return self.cert.local_view


def genesis_qc(cluster: int) -> QuorumCert:
    return QuorumCert(PREPARE, cluster, 0, genesis_block(cluster).digest, None)


class LocalConsensus:
    def __init__(self, ctx: Context, chain: ChainState,
                 gview: Callable[[], int],
                 on_lock: Callable[[Block, LockCertificate], None] = lambda b, c: None):
        self.ctx = ctx
        self.me: ReplicaId = ctx.me
        self.cluster = ctx.me.cluster
        self.n = ctx.params.cluster_sizes[self.cluster]
        self.f = ctx.params.f(self.cluster)
        self.chain = chain
        self.gview = gview
        self.on_lock = on_lock

        self.local_view = 0
        self.entered_at = 0
        self.failures = 0
        self.prepared = genesis_qc(self.cluster)
        self.locked = genesis_qc(self.cluster)
        self.last_block = genesis_block(self.cluster).digest
        self.mempool: dict = {}
        self.locked_txids: set = set()

        self._known: dict = {self.last_block: genesis_block(self.cluster)}
        self._certs: dict = {}  # block digest -> LockCertificate
        self._voted: set = set()  # (phase, view)
        self._newviews: dict = {}  # view -> {sender: NewViewL}
        self._votes: dict = {}  # (phase, view, digest) -> {signer: partial}
        self._formed: set = set()  # (phase, view)
        self._proposed: set = set()
        self._view_gview: dict = {}  # local view -> global view when it was entered

    # -- helpers ---------------------------------------------------------------

    def role_gview(self, view: int) -> int:
        """Global view that fixes the roles of a local view: the one current on entry."""
        return self._view_gview.get(view, self.gview())

    def leader(self, view: int) -> ReplicaId:
        return self.ctx.schedule.local_leader(self.cluster, view, self.role_gview(view))

    def peers(self):
        return [ReplicaId(self.cluster, k) for k in range(self.n)]

    def _broadcast(self, msg):
        for dst in self.peers():
            self.ctx.send(dst, msg)

    def is_locked(self, digest) -> bool:
        return digest in self._certs or digest == genesis_block(self.cluster).digest

    def extends(self, block: Block, ancestor: Digest, depth: int = 64) -> bool:
        cur = block
        for _ in range(depth):
            if cur.digest == ancestor:
                return True
            cur = self._known.get(cur.parent)
            if cur is None:
                return False
        return False

    # -- client input ------------------------------------------------------------

    def add_transaction(self, tx: Transaction) -> bool:
        txid = tx.txid
        if txid in self.mempool or txid in self.locked_txids or txid in self.chain.executed:
            return False
        self.mempool[txid] = tx
        return True

    # -- views -------------------------------------------------------------------

    def start(self):
        self.advance_local_view("start")

    def advance_local_view(self, reason: str, to: Optional[int] = None) -> NewViewL:
        """Enter the next local view and report the highest prepared block."""
        if reason == "timeout":
            self.failures += 1
        elif reason == "committed":
            self.failures = 0
        self.local_view = to if to is not None else self.local_view + 1
        self.entered_at = self.ctx.now()
        view = self.local_view
        # a global view change mid-view must not move the leader away from the new-views
        self._view_gview[view] = self.gview()
        self.ctx.trace("view-change", layer="local", view=view, reason=reason)
        msg = NewViewL(view, self.prepared)
        self.ctx.send(self.leader(view), msg)
        self.ctx.set_timer(("lview",), backoff_timeout(self.ctx.params.local_timeout, self.failures,
                                                     self.ctx.params.max_backoff))
        self.try_propose(view)
        return msg

    def on_timer(self, key):
        if key == ("lview",):
            self.advance_local_view("timeout")
        elif key[0] == "propose":
            self.try_propose(key[1])

    # -- leader ------------------------------------------------------------------

    def on_newview(self, src: ReplicaId, msg: NewViewL):
        if src.cluster != self.cluster or msg.view < self.local_view:
            return
        if not self._valid_qc(msg.prepared, PREPARE):
            return
        self._newviews.setdefault(msg.view, {})[src] = msg
        self.try_propose(msg.view)

    def try_propose(self, view: int):
        if view != self.local_view or view in self._proposed or self.leader(view) != self.me:
            return
        if len(self._newviews.get(view, ())) < self.n - self.f:
            return
        ready = self.entered_at + self.ctx.params.block_interval
        if self.ctx.now() < ready:
            self.ctx.set_timer(("propose", view), ready - self.ctx.now())
            return
        try:
            proposal = self.local_propose(list(self._newviews[view].values()))
        except (NotLeader, InsufficientNewViews, LookupError):
            return
        self._proposed.add(view)
        self.ctx.trace("propose", layer="local", view=view, block=proposal.block.digest,
                       txs=len(proposal.block.txs))
        self._broadcast(proposal)

    def local_propose(self, newviews: list) -> ProposeL:
        """Build the proposal for the current view from ``n - f`` new-view messages."""
        view = self.local_view
        if self.leader(view) != self.me:
            raise NotLeader(f"{self.me} does not lead local view {view}")
        count = sum(1 for m in newviews if m.view == view)
        if count < self.n - self.f:
            raise InsufficientNewViews(f"{count} new-views, need {self.n - self.f}")
        justify = max((m.prepared for m in newviews), key=lambda qc: qc.view)
        justify = max((justify, self.prepared), key=lambda qc: qc.view)
        if self.is_locked(justify.block):
            txs = []
            for txid, tx in self.mempool.items():
                if len(txs) >= self.ctx.params.block_size:
                    break
                txs.append(tx)
            block = Block(origin=self.cluster, local_view=view, parent=justify.block,
                          txs=tuple(txs))
        else:
            block = self._known[justify.block]
        return ProposeL(view, block, justify)

    def on_vote(self, src: ReplicaId, msg: VoteL):
        if src != msg.partial.signer or src.cluster != self.cluster:
            return
        if (msg.phase, msg.view) in self._formed or self.leader(msg.view) != self.me:
            return
        payload = vote_payload(msg.phase, self.cluster, msg.view, msg.block)
        if not verify_partial(msg.partial, payload, self.ctx.registry):
            return
        votes = self._votes.setdefault((msg.phase, msg.view, msg.block), {})
        votes[src] = msg.partial
        if len(votes) < self.ctx.params.quorum(self.cluster):
            return
        sig = combine_cluster(votes.values(), self.cluster, self.ctx.params.quorum(self.cluster))
        self._formed.add((msg.phase, msg.view))
        if msg.phase == COMMIT:
            cert = LockCertificate(msg.block, self.cluster, msg.view, sig)
            self.ctx.trace("lock", layer="local", view=msg.view, block=msg.block,
                           cluster=self.cluster, signers=len(sig.partials))
            self._broadcast(LockL(cert, self._known.get(msg.block)))
        else:
            self._broadcast(QCertL(QuorumCert(msg.phase, self.cluster, msg.view, msg.block, sig)))

    def local_lock(self, votes) -> LockCertificate:
        """Turn commit-phase votes into a lock certificate."""
        votes = [v for v in votes if v.phase == COMMIT]
        keys = {(v.view, v.block) for v in votes}
        if len(keys) != 1:
            raise InsufficientQuorum("commit votes disagree on view or block")
        (view, block), = keys
        try:
            sig = combine_cluster([v.partial for v in votes], self.cluster,
                                  self.ctx.params.quorum(self.cluster), self.ctx.registry)
        except MixedPayload as exc:
            raise InsufficientQuorum(str(exc)) from exc
        return LockCertificate(block, self.cluster, view, sig)

    # -- replica -------------------------------------------------------------------

    def _valid_qc(self, qc: QuorumCert, phase: str) -> bool:
        return qc.phase == phase and qc.cluster == self.cluster and qc.verify(self.ctx.registry)

    def local_vote(self, src: ReplicaId, msg) -> Optional[VoteL]:
        """Vote on a proposal or a quorum certificate; None means silent reject."""
        if isinstance(msg, ProposeL):
            return self._vote_proposal(src, msg)
        if isinstance(msg, QCertL):
            return self._vote_qc(msg.qc)
        return None

    def _vote_proposal(self, src, msg: ProposeL) -> Optional[VoteL]:
        view, block, justify = msg.view, msg.block, msg.justify
        if view < self.local_view or (PREPARE, view) in self._voted:
            return None
        if src != self.leader(view) or block.origin != self.cluster:
            return None
        if len(block.txs) > self.ctx.params.block_size:
            return None
        if not self._valid_qc(justify, PREPARE) or justify.view >= view:
            return None
        reproposal = block.digest == justify.block
        if not reproposal and block.parent != justify.block:
            return None
        if not reproposal:
            if any(tx.txid in self.locked_txids for tx in block.txs):
                return None
            if len({tx.txid for tx in block.txs}) != len(block.txs):
                return None
        self._known.setdefault(block.digest, block)
        safe = self.extends(block, self.locked.block) or justify.view > self.locked.view
        if not safe:
            return None
        if view > self.local_view:
            self.local_view = view
            self.entered_at = self.ctx.now()
            self._view_gview.setdefault(view, self.gview())
            self.ctx.set_timer(("lview",), backoff_timeout(self.ctx.params.local_timeout, self.failures,
                                                     self.ctx.params.max_backoff))
        return self._vote(PREPARE, view, block.digest)

    def _vote_qc(self, qc: QuorumCert) -> Optional[VoteL]:
        if qc.phase not in _NEXT_PHASE or qc.sig is None or not self._valid_qc(qc, qc.phase):
            return None
        if qc.phase == PREPARE:
            if qc.view > self.prepared.view:
                self.prepared = qc
        else:
            if qc.view > self.locked.view:
                self.locked = qc
        if qc.view != self.local_view:
            return None
        phase = _NEXT_PHASE[qc.phase]
        if (phase, qc.view) in self._voted:
            return None
        return self._vote(phase, qc.view, qc.block)

    def _vote(self, phase, view, digest) -> VoteL:
        self._voted.add((phase, view))
        partial = sign_partial(self.me, vote_payload(phase, self.cluster, view, digest),
                               self.ctx.registry)
        return VoteL(phase, view, digest, partial)

    def on_propose_or_qc(self, src, msg):
        vote = self.local_vote(src, msg)
        if vote is not None:
            self.ctx.send(self.leader(vote.view), vote)

    def on_lock_msg(self, src, msg: LockL):
        cert = msg.cert
        if cert.cluster != self.cluster or not cert.verify(self.ctx.registry):
            return
        if msg.block is not None and msg.block.digest == cert.block:
            self._known.setdefault(cert.block, msg.block)
        self.record_lock(cert)
        if cert.local_view >= self.local_view:
            self.advance_local_view("committed", to=cert.local_view + 1)

    def record_lock(self, cert: LockCertificate):
        """Remember a verified lock; store the block once its body is known."""
        self._certs.setdefault(cert.block, cert)
        block = self._known.get(cert.block)
        if block is None:
            return
        for tx in block.txs:
            self.locked_txids.add(tx.txid)
            self.mempool.pop(tx.txid, None)
        if self.chain.blocks.add(block, cert, self.ctx.now()):
            self.last_block = block.digest
            self.on_lock(block, cert)

    def learn_block(self, block: Block, cert: LockCertificate):
        """A locked block of this cluster arrived through dissemination."""
        self._known.setdefault(block.digest, block)
        if block.digest not in self._certs or block.digest not in self.chain.blocks:
            self.record_lock(cert)

    def handle(self, src: ReplicaId, msg):
        if isinstance(msg, NewViewL):
            self.on_newview(src, msg)
        elif isinstance(msg, (ProposeL, QCertL)):
            self.on_propose_or_qc(src, msg)
        elif isinstance(msg, VoteL):
            self.on_vote(src, msg)
        elif isinstance(msg, LockL):
            self.on_lock_msg(src, msg)
