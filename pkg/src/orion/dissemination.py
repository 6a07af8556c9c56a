"""Consistent broadcast of locked blocks to every cluster.

The cluster's rotating disseminator sends each newly locked block to
``f_j + 1`` replicas of every cluster ``j``; a replica receiving a direct copy
relays it to its local peers. Every message also carries signed storage
claims ("replica r stores these digests"), which is how replicas learn that a
block is stored durably without an extra acknowledgement round.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .chain import ChainState
from .core import (
    Block,
    LockCertificate,
    PartialSignature,
    ReplicaId,
    encode,
    sign_partial,
    verify_partial,
)
from .errors import InvalidCert, NotDisseminator
from .params import Context

DIRECT, RELAYED = "direct", "relayed"


def claim_payload(seq: int, digests) -> bytes:
    return encode(("stored", seq, b"".join(digests)))


@dataclass(frozen=True)
class StorageClaim:
    """Signed statement that a replica stores ``digests``; ``seq`` orders its claims."""

    seq: int
    digests: tuple
    partial: PartialSignature

    @property
    def replica(self) -> ReplicaId:
        return self.partial.signer


@dataclass(frozen=True)
class DisseminationMsg:
    block: Block
    cert: LockCertificate
    sender: ReplicaId
    hop: str
    claims: tuple = ()
    kind = "Disseminate"

    @property
    def layer(self):
        return "dissem" if self.hop == DIRECT else "relay"

    @property
    def view(self):
        return self.cert.local_view


@dataclass(frozen=True)
class BlockFetch:
    digests: tuple
    kind = "BlockFetch"
    layer = "fetch"
    view = 0


@dataclass(frozen=True)
class BlockFetchReply:
    entries: tuple  # ((Block, LockCertificate), ...)
    kind = "BlockFetchReply"
    layer = "fetch"
    view = 0


def verify_locked(block: Block, cert: LockCertificate, registry) -> bool:
    return (cert.block == block.digest and cert.cluster == block.origin
            and cert.verify(registry))


class Disseminator:
    def __init__(self, ctx: Context, chain: ChainState, on_store=None):
        self.ctx = ctx
        self.me = ctx.me
        self.chain = chain
        self.on_store = on_store or (lambda block, cert: None)
        self.claims: dict = {}  # replica -> latest verified StorageClaim
        self._claim: Optional[StorageClaim] = None
        self._claim_key = None

    # -- claims ------------------------------------------------------------------

    def my_claim(self) -> StorageClaim:
        key = (len(self.chain.blocks), len(self.chain.committed))
        if self._claim is None or key != self._claim_key:
            seq = key[0] * (1 << 20) + key[1]
            digests = tuple(d for d in self.chain.blocks.digests() if d not in self.chain.committed)
            self._claim = StorageClaim(seq, digests, sign_partial(
                self.me, claim_payload(seq, digests), self.ctx.registry))
            self._claim_key = key
        return self._claim

    def absorb_claims(self, claims):
        durability = self.chain.durability
        for claim in claims:
            known = self.claims.get(claim.replica)
            if known is not None and known.seq >= claim.seq:
                continue
            if not verify_partial(claim.partial, claim_payload(claim.seq, claim.digests),
                                  self.ctx.registry):
                continue
            self.claims[claim.replica] = claim
            fresh = claim.digests if known is None else set(claim.digests).difference(known.digests)
            for d in fresh:
                durability.record_ack(d, claim.replica)

    def outgoing_claims(self) -> tuple:
        """Our claim plus the latest claims of our cluster peers."""
        peers = tuple(c for r, c in sorted(self.claims.items())
                      if r.cluster == self.me.cluster and r != self.me)
        return (self.my_claim(),) + peers

    def claims_for(self, digests) -> tuple:
        """Known claims supporting storage of any of ``digests``."""
        wanted = set(digests)
        if not wanted:
            return ()
        found = tuple(c for _, c in sorted(self.claims.items()) if wanted.intersection(c.digests))
        return (self.my_claim(),) + found

    # -- sending -----------------------------------------------------------------

    def disseminate(self, block: Block, cert: LockCertificate, gview: int) -> list:
        """Messages to ``f_j + 1`` rotating replicas of every cluster."""
        schedule = self.ctx.schedule
        if schedule.disseminator(block.origin, cert.local_view, gview) != self.me:
            raise NotDisseminator(f"{self.me} is not disseminator of local view {cert.local_view}")
        if not verify_locked(block, cert, self.ctx.registry):
            raise InvalidCert("block is not properly locked")
        msg = DisseminationMsg(block, cert, self.me, DIRECT, self.outgoing_claims())
        out = []
        for j in range(self.ctx.params.num_clusters):
            for dst in schedule.targets(j, self.ctx.params.f(j) + 1, cert.local_view):
                out.append((dst, msg))
        return out

    def on_lock(self, block: Block, cert: LockCertificate, gview: int):
        """Called when this replica stores a block locked by its own cluster."""
        self.chain.durability.record_ack(block.digest, self.me)
        if self.ctx.schedule.disseminator(block.origin, cert.local_view, gview) != self.me:
            return
        self.ctx.trace("disseminate", layer="dissem", view=cert.local_view, block=block.digest)
        for dst, msg in self.disseminate(block, cert, gview):
            self.ctx.send(dst, msg)
        # re-offer older blocks of this cluster that are still not durable
        for digest in self.chain.pending_blocks(self.me.cluster):
            if digest == block.digest or self.chain.is_durable(digest):
                continue
            old_block, old_cert = self.chain.blocks.block(digest), self.chain.blocks.cert(digest)
            msg = DisseminationMsg(old_block, old_cert, self.me, DIRECT, self.outgoing_claims())
            for j in range(self.ctx.params.num_clusters):
                for dst in self.ctx.schedule.targets(j, self.ctx.params.f(j) + 1, cert.local_view):
                    self.ctx.send(dst, msg)

    # -- receiving ---------------------------------------------------------------

    def on_receive_disseminated(self, src: ReplicaId, msg: DisseminationMsg) -> list:
        """Verify, store and (for direct copies) relay. Returns the relay messages sent."""
        self.absorb_claims(msg.claims)
        block, cert = msg.block, msg.cert
        if not verify_locked(block, cert, self.ctx.registry):
            self.ctx.trace("drop", layer="dissem", view=cert.local_view, block=block.digest,
                           sender=str(src), reason="invalid lock")
            return []
        if not self.store(block, cert):
            return []
        relays = []
        if msg.hop == DIRECT:
            relay = DisseminationMsg(block, cert, self.me, RELAYED,
                                     msg.claims + (self.my_claim(),))
            n = self.ctx.params.cluster_sizes[self.me.cluster]
            for k in range(n):
                if k != self.me.index:
                    dst = ReplicaId(self.me.cluster, k)
                    self.ctx.send(dst, relay)
                    relays.append((dst, relay))
        return relays

    def store(self, block: Block, cert: LockCertificate) -> bool:
        if not self.chain.blocks.add(block, cert, self.ctx.now()):
            return False
        self.chain.durability.record_ack(block.digest, self.me)
        self.ctx.trace("store", layer="dissem", view=cert.local_view, block=block.digest,
                       origin=block.origin)
        self.on_store(block, cert)
        return True

    def on_fetch(self, src: ReplicaId, msg: BlockFetch):
        entries = tuple((self.chain.blocks.block(d), self.chain.blocks.cert(d))
                        for d in msg.digests if d in self.chain.blocks)
        if entries:
            self.ctx.send(src, BlockFetchReply(entries))

    def on_fetch_reply(self, src: ReplicaId, msg: BlockFetchReply):
        for block, cert in msg.entries:
            if verify_locked(block, cert, self.ctx.registry):
                self.store(block, cert)

    def handle(self, src, msg):
        if isinstance(msg, DisseminationMsg):
            self.on_receive_disseminated(src, msg)
        elif isinstance(msg, BlockFetch):
            self.on_fetch(src, msg)
        elif isinstance(msg, BlockFetchReply):
            self.on_fetch_reply(src, msg)
