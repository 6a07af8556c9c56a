"""Byzantine behaviors as filters on a correct replica's outgoing messages."""

from __future__ import annotations

import dataclasses

from ..core import Block, Transaction, hash_bytes
from .config import BYZANTINE_KINDS, FaultBehavior

ROLE_KINDS = {
    "local_leader": frozenset({"ProposeL", "QCertL", "LockL"}),
    "disseminator": frozenset({"Disseminate"}),
    "representative": frozenset({"CosignRequest", "NewViewG", "PrepVoteG", "PcomVoteG",
                                 "DecideLocal"}),
    "global_leader": frozenset({"PrepareG", "PrecommitG", "DecideG"}),
}


def applies_to(behavior: FaultBehavior, rid) -> bool:
    if behavior.target is not None:
        return behavior.replica == rid
    return behavior.cluster is None or behavior.cluster == rid.cluster


def _in_window(window, value) -> bool:
    lo, hi = window
    return (lo is None or value >= lo) and (hi is None or value <= hi)


def _alt_block(block: Block) -> Block:
    txs = block.txs[1:] if block.txs else (Transaction(-1, block.local_view, b"conflict"),)
    return Block(block.origin, block.local_view, block.parent, txs)


def _alt_superblock(sb):
    ids = sb.block_ids[:-1] if sb.block_ids else ()
    view = sb.view if sb.block_ids else sb.view + 1
    return dataclasses.replace(sb, block_ids=ids, view=view)


def conflicting(msg):
    """A conflicting variant of ``msg``, or None when only silence is possible."""
    kind = msg.kind
    if kind == "ProposeL":
        return dataclasses.replace(msg, block=_alt_block(msg.block))
    if kind == "Disseminate" and msg.hop == "direct":
        return dataclasses.replace(msg, block=_alt_block(msg.block))
    if kind == "PrepareG":
        return dataclasses.replace(msg, sb=_alt_superblock(msg.sb))
    if kind == "CosignRequest":
        if msg.sb is not None:
            return dataclasses.replace(msg, sb=_alt_superblock(msg.sb))
        if msg.kind_ == "nv":
            return dataclasses.replace(msg, prepv=(msg.prepv or 0) + 1)
        return None
    if kind in ("NewViewG", "PrepVoteG", "PcomVoteG"):
        phi = msg.phi
        if phi.h is None:
            phi = dataclasses.replace(phi, v2=(phi.v2 or 0) + 1)
        else:
            phi = dataclasses.replace(phi, h=hash_bytes(b"conflict" + phi.h))
        return dataclasses.replace(msg, phi=phi)
    return None


class ReplicaFaults:
    """Behaviors attached to one replica and the state they need."""

    def __init__(self, node, behaviors):
        self.node = node
        self.behaviors = [b for b in behaviors if b.kind in BYZANTINE_KINDS]
        self._history: dict = {}  # kind -> (previous msg, current msg)

    def __bool__(self):
        return bool(self.behaviors)

    def _active(self, b: FaultBehavior) -> bool:
        return _in_window(b.time, self.node.now()) and _in_window(b.views, self.node.gview)

    def _covers(self, b: FaultBehavior, msg) -> bool:
        if b.kinds and msg.kind not in b.kinds:
            return False
        if b.role is None:
            return True
        if b.role == "disseminator" and getattr(msg, "hop", "direct") != "direct":
            return False
        return msg.kind in ROLE_KINDS[b.role]

    def sign_everything(self) -> bool:
        """Byzantine co-signers approve any request while their behavior is active."""
        for b in self.behaviors:
            if b.sign_all and self._active(b) and (b.role is None or self.node.holds(b.role)):
                return True
        return False

    def outbound(self, dst, msg) -> list:
        """What actually leaves the replica for one intended send: [(dst, msg, extra_delay)]."""
        delay = 0
        for b in self.behaviors:
            if not self._active(b) or not self._covers(b, msg):
                continue
            if b.kind == "omit":
                return []
            if b.kind == "delay":
                delay += b.amount
            elif b.kind == "equivocate":
                if (dst.cluster + dst.index) % 2 == 1:
                    alt = conflicting(msg)
                    if alt is None:
                        return []
                    msg = alt
            elif b.kind == "stale_certificate":
                msg = self._stale(msg)
        return [(dst, msg, delay)]

    def _stale(self, msg):
        view = getattr(msg, "view", 0)
        prev, cur = self._history.get(msg.kind, (None, None))
        if cur is None or getattr(cur, "view", 0) < view:
            prev, cur = cur, msg
            self._history[msg.kind] = (prev, cur)
        if prev is not None and getattr(prev, "view", 0) < view:
            return prev
        return msg
