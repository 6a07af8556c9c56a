"""Global agreement on superblocks among cluster representatives.

Every state transition is cluster-confirmed: a representative cannot vote,
report its prepared superblock or extend an accumulator without ``n - f``
replicas of its cluster co-signing, and each co-signer checks the step
against its own copy of the state before signing. The module has two layers:
pure functions over confirmations (matching, combining, accumulator steps,
leaf creation) and :class:`GlobalConsensus`, the per-replica event handler.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .chain import ChainState
from .core import (
    GENESIS_SUPERBLOCK,
    ClusterConfirmation,
    CombinedConfirmation,
    Extension,
    Phase,
    ReplicaId,
    SuperBlock,
    combine_cluster,
    confirmation_payload,
    ext_final_payload,
    ext_progress_payload,
    hash_bytes,
    sign_partial,
    verify_partial,
)
from .dissemination import BlockFetch
from .errors import (
    BadCertificate,
    BadConfirmation,
    BadExtension,
    InsufficientContributors,
    InsufficientQuorum,
    LocalQuorumTimeout,
    MatchFailed,
    NullProposal,
    OrionError,
    ViewMismatch,
)
from .params import Context
from .roles import backoff_timeout

FIRST_VIEW = 1


# -- pure operations ---------------------------------------------------------------


def c_match(confs, count: int, h, v: int, ph: Phase, registry) -> bool:
    """True iff ``count`` distinct clusters confirmed ``(h, v, ph)``; ``h=None`` matches any."""
    clusters = set()
    for phi in confs:
        if phi.v != v or phi.ph is not ph:
            continue
        if h is not None and phi.h != h:
            continue
        if phi.verify(registry):
            clusters.add(phi.clid)
    return len(clusters) >= count


def c_combine(confs, count: int, registry) -> CombinedConfirmation:
    """Merge confirmations of one statement from ``count`` distinct clusters.

    The lowest cluster ids are kept, so the result does not depend on the
    order in which confirmations arrived.
    """
    groups: dict = {}
    for phi in confs:
        if not phi.verify(registry):
            continue
        groups.setdefault(phi.payload, {}).setdefault(phi.clid, phi)
    best = None
    for by_cluster in groups.values():
        if len(by_cluster) < count:
            continue
        chosen = [by_cluster[c] for c in sorted(by_cluster)[:count]]
        key = tuple(p.clid for p in chosen)
        if best is None or key < best[0]:
            best = (key, chosen)
    if best is None:
        raise MatchFailed(f"no statement confirmed by {count} distinct clusters")
    chosen = best[1]
    first = chosen[0]
    return CombinedConfirmation(first.h, first.v, first.h2, first.v2, first.ph,
                                tuple(p.sig for p in chosen))


def create_cluster_sign(cluster: int, payload: bytes, approvers, registry):
    """Collect partials from the replicas that approve ``payload``.

    Synchronous form of the co-signing round, used where the caller already
    knows which replicas accept. Raises LocalQuorumTimeout below ``n - f``.
    """
    partials = [sign_partial(r, payload, registry) for r in approvers if r.cluster == cluster]
    try:
        return combine_cluster(partials, cluster, registry.quorum(cluster))
    except InsufficientQuorum as exc:
        raise LocalQuorumTimeout(str(exc)) from None


def _check_newview(phi: ClusterConfirmation, registry):
    if not isinstance(phi, ClusterConfirmation) or phi.ph is not Phase.NV or phi.h is not None:
        raise BadConfirmation("not a new-view confirmation")
    if not phi.verify(registry):
        raise BadConfirmation("new-view confirmation does not verify")


def start_payload(phi: ClusterConfirmation, registry) -> bytes:
    _check_newview(phi, registry)
    return ext_progress_payload(phi.v, phi.v2, phi.h2, (phi.clid,))


def iterate_payload(ext: Extension, phi: ClusterConfirmation, registry) -> Optional[bytes]:
    """Payload of the extended accumulator, or None when ``phi`` does not qualify."""
    if ext.finalized or not ext.verify(registry):
        raise BadExtension("accumulator does not verify")
    _check_newview(phi, registry)
    if phi.v != ext.v or phi.v2 > ext.v2 or phi.clid in ext.contributors:
        return None
    return ext_progress_payload(ext.v, ext.v2, ext.h2, ext.contributors + (phi.clid,))


def finalize_payload(ext: Extension, needed: int, registry) -> bytes:
    if ext.finalized or not ext.verify(registry):
        raise BadExtension("accumulator does not verify")
    if len(set(ext.contributors)) < needed:
        raise InsufficientContributors(f"{len(ext.contributors)} contributors, need {needed}")
    return ext_final_payload(ext.v, ext.v2, ext.h2, len(ext.contributors))


def cluster_start(phi, cosign: Callable, registry) -> Extension:
    """Open an accumulator from one new-view confirmation.

    ``cosign(payload)`` returns the leader cluster's signature.
    """
    sig = cosign(start_payload(phi, registry))
    return Extension(phi.v, phi.v2, phi.h2, sig, contributors=(phi.clid,))


def cluster_iterate(ext: Extension, phi, cosign: Callable, registry) -> Extension:
    payload = iterate_payload(ext, phi, registry)
    if payload is None:
        return ext
    return Extension(ext.v, ext.v2, ext.h2, cosign(payload),
                     contributors=ext.contributors + (phi.clid,))


def cluster_finalize(ext: Extension, needed: int, cosign: Callable, registry) -> Extension:
    sig = cosign(finalize_payload(ext, needed, registry))
    return Extension(ext.v, ext.v2, ext.h2, sig, count=len(ext.contributors))


def ext_order(confs) -> tuple:
    """Highest prepared view first (lowest cluster on ties), then the rest by cluster."""
    ranked = sorted(confs, key=lambda p: (-p.v2, p.clid))
    return ranked[0], sorted(ranked[1:], key=lambda p: p.clid)


def ext_list(confs, needed: int, view: int, cosign: Callable, registry) -> Extension:
    confs = list(confs)
    if not c_match(confs, needed, None, view, Phase.NV, registry):
        raise MatchFailed(f"fewer than {needed} new-view confirmations for view {view}")
    unique = {}
    for phi in confs:
        if phi.v == view and phi.ph is Phase.NV and phi.verify(registry):
            # one statement per cluster: the highest prepared view, lowest digest on ties
            best = unique.get(phi.clid)
            if best is None or (-phi.v2, bytes(phi.h2)) < (-best.v2, bytes(best.h2)):
                unique[phi.clid] = phi
    first, rest = ext_order(unique.values())
    ext = cluster_start(first, cosign, registry)
    for phi in rest:
        ext = cluster_iterate(ext, phi, cosign, registry)
    return cluster_finalize(ext, needed, cosign, registry)


def create_leaf(ext: Extension, block_ids, prev: SuperBlock) -> SuperBlock:
    if prev.digest != ext.h2:
        raise BadExtension("parent body does not match the accumulator")
    return SuperBlock(prev=ext.h2, height=prev.height + 1, view=ext.v,
                      block_ids=tuple(block_ids))


def check_extension(ext: Extension, view: int, leader_cluster: int, needed: int, registry):
    if not isinstance(ext, Extension) or not ext.finalized:
        raise BadExtension("accumulator is not finalized")
    if ext.sig.cluster != leader_cluster or not ext.verify(registry):
        raise BadExtension("accumulator is not signed by the leader cluster")
    if ext.count < needed:
        raise BadExtension(f"accumulator covers {ext.count} clusters, need {needed}")
    if ext.v != view:
        raise ViewMismatch(f"accumulator for view {ext.v}, current view {view}")


def prepare_payload(sb: Optional[SuperBlock], ext: Extension, view: int, leader_cluster: int,
                    needed: int, registry) -> bytes:
    """What a cluster signs to prepare ``sb``; raises if the proposal is unacceptable."""
    check_extension(ext, view, leader_cluster, needed, registry)
    if sb is None:
        raise NullProposal("no superblock proposed")
    if sb.view != view:
        raise ViewMismatch(f"superblock for view {sb.view}, current view {view}")
    if sb.prev != ext.h2:
        raise BadExtension("superblock does not extend the highest prepared superblock")
    return confirmation_payload(sb.digest, view, ext.h2, ext.v2, Phase.PREP)


def cl_prepare(cluster: int, sb, ext, view: int, leader_cluster: int, needed: int,
               approvers, registry) -> ClusterConfirmation:
    payload = prepare_payload(sb, ext, view, leader_cluster, needed, registry)
    sig = create_cluster_sign(cluster, payload, approvers, registry)
    return ClusterConfirmation(sb.digest, view, ext.h2, ext.v2, Phase.PREP, sig)


def check_certificate(cert, ph: Phase, needed: int, registry):
    if not isinstance(cert, CombinedConfirmation) or cert.ph is not ph:
        raise BadCertificate(f"expected a {ph.value} certificate")
    if not cert.verify(registry, needed):
        raise BadCertificate(f"certificate does not verify for {needed} clusters")


def pcom_payload(cert: CombinedConfirmation, view: int, needed: int, registry) -> bytes:
    check_certificate(cert, Phase.PREP, needed, registry)
    if cert.v != view:
        raise ViewMismatch(f"certificate for view {cert.v}, current view {view}")
    return confirmation_payload(cert.h, view, None, None, Phase.PCOM)


def cl_pcom(cluster: int, cert, view: int, needed: int, approvers, registry) -> ClusterConfirmation:
    payload = pcom_payload(cert, view, needed, registry)
    sig = create_cluster_sign(cluster, payload, approvers, registry)
    return ClusterConfirmation(cert.h, view, None, None, Phase.PCOM, sig)


def global_targets(schedule, params, cluster: int, view: int) -> list:
    """``f_j + 1`` rotating replicas of ``cluster``, always including its representative."""
    targets = schedule.targets(cluster, params.f(cluster) + 1, view)
    rep = schedule.representative(cluster, view)
    if rep not in targets:
        targets[-1] = rep
    return targets


# -- messages ---------------------------------------------------------------------


@dataclass(frozen=True)
class NewViewG:
    phi: ClusterConfirmation
    prep_cert: Optional[CombinedConfirmation] = None
    path: tuple = ()
    step: int = 1
    kind = "NewViewG"
    layer = "global"

    @property
    def view(self):
        return self.phi.v


@dataclass(frozen=True)
class PrepareG:
    sb: SuperBlock
    ext: Extension
    phi: ClusterConfirmation
    path: tuple = ()
    claims: tuple = ()
    justify: object = None
    step: int = 2
    kind = "PrepareG"
    layer = "global"

    @property
    def view(self):
        return self.phi.v


@dataclass(frozen=True)
class PrepVoteG:
    phi: ClusterConfirmation
    step: int = 3
    kind = "PrepVoteG"
    layer = "global"

    @property
    def view(self):
        return self.phi.v


@dataclass(frozen=True)
class PrecommitG:
    cert: CombinedConfirmation
    sb: Optional[SuperBlock] = None
    path: tuple = ()
    step: int = 4
    kind = "PrecommitG"
    layer = "global"

    @property
    def view(self):
        return self.cert.v


@dataclass(frozen=True)
class PcomVoteG:
    phi: ClusterConfirmation
    step: int = 5
    kind = "PcomVoteG"
    layer = "global"

    @property
    def view(self):
        return self.phi.v


@dataclass(frozen=True)
class DecideG:
    sb: SuperBlock
    cert: CombinedConfirmation
    path: tuple = ()
    step: int = 6
    kind = "DecideG"
    layer = "global"

    @property
    def view(self):
        return self.cert.v


@dataclass(frozen=True)
class DecideLocal:
    sb: SuperBlock
    cert: CombinedConfirmation
    path: tuple = ()
    step: int = 6
    kind = "DecideLocal"
    layer = "cosign"

    @property
    def view(self):
        return self.cert.v


@dataclass(frozen=True)
class CosignRequest:
    kind_: str  # nv, start, iter, final, prep, pcom
    view: int
    seq: int
    sb: Optional[SuperBlock] = None
    ext: Optional[Extension] = None
    phi: Optional[ClusterConfirmation] = None
    cert: Optional[CombinedConfirmation] = None
    preph: object = None
    prepv: Optional[int] = None
    path: tuple = ()
    claims: tuple = ()
    justify: object = None
    kind = "CosignRequest"
    layer = "cosign"


@dataclass(frozen=True)
class CosignResponse:
    kind_: str
    view: int
    seq: int
    partial: object = None
    cert: Optional[CombinedConfirmation] = None  # sent instead of a partial by a replica ahead of the requester
    path: tuple = ()
    kind = "CosignResponse"
    layer = "cosign"


class Defer(Exception):
    """The request may become acceptable later; ``fetch`` lists missing block bodies."""

    def __init__(self, reason: str, fetch=()):
        super().__init__(reason)
        self.fetch = tuple(fetch)


@dataclass
class _Round:
    req: CosignRequest
    payload: bytes
    on_done: Callable
    partials: dict = field(default_factory=dict)
    done: bool = False

    @property
    def digest(self):
        return hash_bytes(self.payload)


@dataclass
class _LeaderState:
    view: int
    nv: dict = field(default_factory=dict)
    ext_started: bool = False
    sb: Optional[SuperBlock] = None
    path: tuple = ()
    prep_votes: dict = field(default_factory=dict)
    prep_step: int = 0
    prep_cert: Optional[CombinedConfirmation] = None
    pcom_votes: dict = field(default_factory=dict)
    pcom_step: int = 0
    decided: bool = False


# -- the replica component ------------------------------------------------------------


class GlobalConsensus:
    """Global view state and role logic for one replica.

    Every replica co-signs; the replica that is its cluster's representative
    in the current view also drives rounds, and the leader cluster's
    representative runs the leader pipeline.
    """

    DEFERRED_LIMIT = 256
    DEFERRABLE = ("unknown parent", "ancestry unknown", "block unavailable", "block not durable")

    def __init__(self, ctx: Context, chain: ChainState, claims_for: Callable = lambda ds: (),
                 absorb_claims: Callable = lambda claims: None,
                 reply_filter: Callable = lambda block, tx: True,
                 on_replies: Callable = lambda replies: None):
        self.ctx = ctx
        self.me: ReplicaId = ctx.me
        self.cluster = self.me.cluster
        self.params = ctx.params
        self.schedule = ctx.schedule
        self.registry = ctx.registry
        self.chain = chain
        self.claims_for = claims_for
        self.absorb_claims = absorb_claims
        self.reply_filter = reply_filter
        self.on_replies = on_replies
        self.needed = self.params.F + 1
        self.view = 0
        self.failures = 0
        self.preph = GENESIS_SUPERBLOCK.digest
        self.prepv = 0
        self.prep_cert: Optional[CombinedConfirmation] = None
        self.evidence = None  # certificate that moved us into the current view
        self.signed: dict = {}  # (view, kind) -> digest of the signed payload
        self.deferred: list = []
        self.pending_decides: dict = {}
        self.future_nv: dict = {}
        self.lead: Optional[_LeaderState] = None
        self._rounds: dict = {}
        self._seq = 0
        self.sign_everything: Callable = lambda: False

    # -- helpers ---------------------------------------------------------------------

    @property
    def is_rep(self) -> bool:
        return self.schedule.representative(self.cluster, self.view) == self.me

    @property
    def is_leader(self) -> bool:
        return self.schedule.global_leader_replica(self.view) == self.me

    def peers(self):
        n = self.params.cluster_sizes[self.cluster]
        return [ReplicaId(self.cluster, k) for k in range(n) if k != self.me.index]

    def _path(self, digest) -> tuple:
        sb = self.chain.superblocks.get(digest)
        if sb is None:
            return ()
        return tuple(self.chain.superblocks.tail(digest, sb.height))

    def _learn_path(self, path, *extra):
        self.chain.superblocks.add_path(path)
        for sb in extra:
            if sb is not None:
                self.chain.superblocks.add(sb)

    def _reject(self, what: str, exc: Exception, view=None):
        self.ctx.trace("reject", layer="global", view=self.view if view is None else view,
                       what=what, reason=f"{type(exc).__name__}: {exc}")

    # -- view changes ----------------------------------------------------------------

    def start(self):
        self.enter_view(FIRST_VIEW, "start")

    def enter_view(self, view: int, reason: str, evidence=None):
        if view <= self.view:
            return
        self.ctx.cancel_timer(("global", self.view))
        self.view = view
        self.evidence = evidence
        self.ctx.set_timer(("global", view), backoff_timeout(self.params.global_timeout, self.failures,
                                                               self.params.max_backoff))
        self._rounds.clear()
        self.lead = _LeaderState(view) if self.is_leader else None
        self.signed = {k: d for k, d in self.signed.items() if k[0] >= view - 1}
        self.ctx.trace("gview", layer="global", view=view, reason=reason,
                       rep=self.is_rep, leader=self.is_leader)
        if self.lead is not None:
            for phi, step in self.future_nv.pop(view, {}).values():
                self.lead.nv[phi.clid] = phi
        self.future_nv = {v: d for v, d in self.future_nv.items() if v > view}
        if self.is_rep:
            self._start_newview()
        self._maybe_start_ext()
        self._retry_deferred()

    def on_timer(self, key):
        if key[0] == "global" and key[1] == self.view:
            self.failures += 1
            pending = sorted(r.req.kind_ for r in self._rounds.values() if not r.done)
            self.ctx.trace("timeout", layer="global", view=self.view, failures=self.failures,
                           pending=pending)
            self.enter_view(self.view + 1, "timeout")
        elif key[0] == "fetch":
            self._refetch(key[1], key[2])

    def observe(self, evidence):
        """Move forward on certificates proving that enough clusters moved forward."""
        if evidence is None:
            return
        target = None
        if isinstance(evidence, CombinedConfirmation):
            if evidence.verify(self.registry, self.needed):
                if evidence.ph is Phase.PCOM:
                    target = evidence.v + 1
                elif evidence.ph is Phase.PREP:
                    self.adopt(evidence)
                    target = evidence.v
                else:
                    target = evidence.v
        elif isinstance(evidence, tuple) and evidence:
            view = evidence[0].v
            if c_match(evidence, self.needed, None, view, Phase.NV, self.registry):
                target = view
        if target is not None and target > self.view:
            self.enter_view(target, "certificate", evidence)

    def adopt(self, cert: CombinedConfirmation) -> bool:
        """Raise the accumulator to a higher verified prepare certificate."""
        if cert is None or cert.v <= self.prepv or cert.ph is not Phase.PREP:
            return False
        if not cert.verify(self.registry, self.needed):
            return False
        self.preph, self.prepv, self.prep_cert = cert.h, cert.v, cert
        self.ctx.trace("prepared", layer="global", view=self.view, prepv=cert.v, preph=cert.h)
        return True

    # -- co-signing (every replica) -------------------------------------------------------

    def approve(self, req: CosignRequest) -> bytes:
        """Check a co-signing request against local state and return the payload to sign."""
        if req.view < self.view:
            raise ViewMismatch(f"request for view {req.view}, current view {self.view}")
        if req.view > self.view:
            raise Defer("request from a future view")
        reckless = self.sign_everything()
        kind = req.kind_
        leader_cluster = self.schedule.global_leader(req.view)
        if kind == "nv":
            payload = confirmation_payload(None, req.view, req.preph, req.prepv, Phase.NV)
            if not reckless and (req.prepv, req.preph) != (self.prepv, self.preph):
                cert = req.cert
                if not (req.prepv > self.prepv and cert is not None and cert.h == req.preph
                        and cert.v == req.prepv and self.adopt(cert)):
                    raise BadConfirmation("reported prepared superblock differs from ours")
        elif kind in ("start", "iter", "final"):
            if not reckless and self.cluster != leader_cluster:
                raise BadExtension("only the leader cluster builds the accumulator")
            if kind == "start":
                payload = start_payload(req.phi, self.registry)
                if req.phi.v != req.view:
                    raise ViewMismatch("new-view confirmation for another view")
            elif kind == "iter":
                if req.ext.sig.cluster != self.cluster or req.ext.v != req.view:
                    raise BadExtension("accumulator from another cluster or view")
                payload = iterate_payload(req.ext, req.phi, self.registry)
                if payload is None:
                    raise BadConfirmation("confirmation does not qualify")
            else:
                if req.ext.sig.cluster != self.cluster or req.ext.v != req.view:
                    raise BadExtension("accumulator from another cluster or view")
                payload = finalize_payload(req.ext, self.needed, self.registry)
        elif kind == "prep":
            self._learn_path(req.path)
            self.absorb_claims(req.claims)
            payload = prepare_payload(req.sb, req.ext, req.view, leader_cluster, self.needed,
                                      self.registry)
            if not reckless:
                if self.cluster != leader_cluster:
                    phi = req.phi
                    if (phi is None or phi.clid != leader_cluster or phi.payload != payload
                            or not phi.verify(self.registry)):
                        raise BadConfirmation("leader cluster did not prepare this superblock")
                problem = self.chain.superblock_problem(req.sb)
                if problem in self.DEFERRABLE:
                    missing = [d for _, d in req.sb.block_ids if d not in self.chain.blocks]
                    raise Defer(problem, missing)
                if problem is not None:
                    raise NullProposal(f"invalid superblock: {problem}")
            self.chain.superblocks.add(req.sb)
        elif kind == "pcom":
            payload = pcom_payload(req.cert, req.view, self.needed, self.registry)
            self._learn_path(req.path, req.sb)
            self.adopt(req.cert)
        else:
            raise OrionError(f"unknown co-signing kind {kind!r}")
        digest = hash_bytes(payload)
        if kind in ("nv", "prep", "pcom"):
            key = (req.view, kind)
            if not reckless and self.signed.get(key, digest) != digest:
                raise BadConfirmation(f"already signed a different {kind} for view {req.view}")
            self.signed[key] = digest
        self.ctx.trace("cosign", layer="cosign", view=req.view, what=kind, digest=digest,
                       signer=str(self.me))
        return payload

    def on_cosign_request(self, src: ReplicaId, req: CosignRequest):
        if src.cluster != self.cluster:
            return
        self.observe(req.justify)
        if src != self.schedule.representative(self.cluster, req.view):
            return
        try:
            payload = self.approve(req)
        except Defer as d:
            self._defer(src, req, d)
            return
        except OrionError as exc:
            self._reject(f"cosign:{req.kind_}", exc, req.view)
            if req.kind_ == "nv" and self.prepv > (req.prepv or 0):
                self.ctx.send(src, CosignResponse(req.kind_, req.view, req.seq, None,
                                                  self.prep_cert, self._path(self.preph)))
            return
        partial = sign_partial(self.me, payload, self.registry)
        self.ctx.send(src, CosignResponse(req.kind_, req.view, req.seq, partial))

    def _defer(self, src, msg, d: Defer):
        if len(self.deferred) < self.DEFERRED_LIMIT:
            self.deferred.append((src, msg))
        if d.fetch:
            self.ctx.send(src, BlockFetch(tuple(d.fetch)))

    def _retry_deferred(self):
        if not self.deferred:
            return
        items, self.deferred = self.deferred, []
        for src, msg in items:
            if msg.view >= self.view:
                self.handle(src, msg)

    def on_new_data(self):
        """Call after new blocks or claims arrive; retries parked work."""
        self._retry_deferred()
        for digest in list(self.pending_decides):
            entry = self.pending_decides.get(digest)
            if entry is not None:
                self._try_execute(*entry)

    # -- rounds driven by the representative ----------------------------------------------

    def _try_cosign(self, kind: str, on_done: Callable, **fields):
        try:
            self._cosign(kind, on_done, **fields)
        except (Defer, OrionError) as exc:
            self._reject(f"own:{kind}", exc)

    def _cosign(self, kind: str, on_done: Callable, **fields):
        """Sign ourselves, then ask local peers; raises if we would not sign."""
        self._seq += 1
        req = CosignRequest(kind, self.view, self._seq, justify=self.evidence, **fields)
        payload = self.approve(req)
        rnd = _Round(req, payload, on_done)
        rnd.partials[self.me] = sign_partial(self.me, payload, self.registry)
        self._rounds[req.seq] = rnd
        for peer in self.peers():
            self.ctx.send(peer, req)
        self._check_round(rnd)

    def _check_round(self, rnd: _Round):
        if rnd.done or len(rnd.partials) < self.registry.quorum(self.cluster):
            return
        rnd.done = True
        sig = combine_cluster(rnd.partials.values(), self.cluster, self.registry.quorum(self.cluster))
        rnd.on_done(sig)

    def on_cosign_response(self, src: ReplicaId, msg: CosignResponse):
        rnd = self._rounds.get(msg.seq)
        if rnd is None or rnd.req.view != self.view or src.cluster != self.cluster:
            return
        if msg.partial is None:
            self._learn_path(msg.path)
            if rnd.req.kind_ == "nv" and not rnd.done and self.adopt(msg.cert):
                rnd.done = True
                self._start_newview()
            return
        p = msg.partial
        if p.signer != src or not verify_partial(p, rnd.payload, self.registry):
            return
        rnd.partials.setdefault(src, p)
        self._check_round(rnd)

    def _start_newview(self):
        view, preph, prepv = self.view, self.preph, self.prepv

        def done(sig):
            phi = ClusterConfirmation(None, view, preph, prepv, Phase.NV, sig)
            msg = NewViewG(phi, self.prep_cert, self._path(preph))
            leader = self.schedule.global_leader_replica(view)
            if leader == self.me:
                self.on_newview(self.me, msg)
            else:
                self.ctx.send(leader, msg)

        self._try_cosign("nv", done, preph=preph, prepv=prepv, cert=self.prep_cert)

    # -- leader pipeline -----------------------------------------------------------------

    def on_newview(self, src, msg: NewViewG):
        phi = msg.phi
        try:
            _check_newview(phi, self.registry)
        except OrionError as exc:
            self._reject("NewViewG", exc, phi.v)
            return
        self._learn_path(msg.path)
        self.adopt(msg.prep_cert)
        if self.schedule.global_leader_replica(phi.v) != self.me or phi.v < self.view:
            return
        if phi.v > self.view:
            bucket = self.future_nv.setdefault(phi.v, {})
            bucket[phi.clid] = (phi, msg.step)
            if len(bucket) >= self.needed:
                self.enter_view(phi.v, "certificate", tuple(p for p, _ in bucket.values()))
            return
        if self.lead is None:
            return
        self.lead.nv.setdefault(phi.clid, phi)
        self._maybe_start_ext()

    def _maybe_start_ext(self):
        lead = self.lead
        if lead is None or lead.ext_started or len(lead.nv) < self.needed:
            return
        lead.ext_started = True
        first, rest = ext_order(lead.nv.values())
        view = self.view

        def started(sig):
            ext = Extension(view, first.v2, first.h2, sig, contributors=(first.clid,))
            self._ext_next(ext, list(rest))

        self._try_cosign("start", started, phi=first)

    def _ext_next(self, ext: Extension, rest: list):
        view = self.view
        while rest:
            phi = rest.pop(0)
            if iterate_payload(ext, phi, self.registry) is None:
                continue

            def iterated(sig, phi=phi):
                self._ext_next(Extension(view, ext.v2, ext.h2, sig,
                                         contributors=ext.contributors + (phi.clid,)), rest)

            self._try_cosign("iter", iterated, ext=ext, phi=phi)
            return

        def finalized(sig):
            self._propose(Extension(view, ext.v2, ext.h2, sig, count=len(ext.contributors)))

        self._try_cosign("final", finalized, ext=ext)

    def _propose(self, ext: Extension):
        lead = self.lead
        prev = self.chain.superblocks.get(ext.h2)
        if prev is None or self.chain.superblocks.summary(ext.h2) is None:
            self._reject("propose", BadExtension("highest prepared superblock unknown"))
            return
        sb = create_leaf(ext, self.chain.propose_ids(ext.h2), prev)
        path = self._path(ext.h2)
        claims = tuple(self.claims_for([d for _, d in sb.block_ids]))
        view = self.view
        self.ctx.trace("propose", layer="global", view=view, sb=sb.digest, height=sb.height,
                       blocks=len(sb.block_ids))

        def prepared(sig):
            phi = ClusterConfirmation(sb.digest, view, ext.h2, ext.v2, Phase.PREP, sig)
            lead.sb, lead.path = sb, path + (sb,)
            lead.prep_votes[self.cluster] = phi
            lead.prep_step = max(lead.prep_step, 2)
            msg = PrepareG(sb, ext, phi, path, claims, self.evidence, step=2)
            for j in range(self.params.num_clusters):
                if j != self.cluster:
                    for dst in global_targets(self.schedule, self.params, j, view):
                        self.ctx.send(dst, msg)
            self._maybe_precommit()

        self._try_cosign("prep", prepared, sb=sb, ext=ext, path=path, claims=claims)

    def on_prep_vote(self, src, msg: PrepVoteG):
        lead, phi = self.lead, msg.phi
        if lead is None or lead.sb is None or phi.v != self.view or phi.ph is not Phase.PREP:
            return
        if phi.h != lead.sb.digest or not phi.verify(self.registry):
            self._reject("PrepVoteG", BadConfirmation("vote for another superblock"))
            return
        lead.prep_votes.setdefault(phi.clid, phi)
        lead.prep_step = max(lead.prep_step, msg.step)
        self._maybe_precommit()

    def _maybe_precommit(self):
        lead = self.lead
        if lead.prep_cert is not None or len(lead.prep_votes) < self.needed:
            return
        cert = c_combine(lead.prep_votes.values(), self.needed, self.registry)
        lead.prep_cert = cert
        view, step = self.view, lead.prep_step + 1
        self.ctx.trace("certificate", layer="global", view=view, phase="prep", sb=cert.h)

        def committed(sig):
            lead.pcom_votes[self.cluster] = ClusterConfirmation(cert.h, view, None, None,
                                                                Phase.PCOM, sig)
            lead.pcom_step = max(lead.pcom_step, step)
            msg = PrecommitG(cert, lead.sb, lead.path[:-1], step=step)
            for j in range(self.params.num_clusters):
                if j != self.cluster:
                    for dst in global_targets(self.schedule, self.params, j, view):
                        self.ctx.send(dst, msg)
            self._maybe_decide()

        self._try_cosign("pcom", committed, cert=cert, sb=lead.sb, path=lead.path[:-1])

    def on_pcom_vote(self, src, msg: PcomVoteG):
        lead, phi = self.lead, msg.phi
        if lead is None or lead.prep_cert is None or phi.v != self.view or phi.ph is not Phase.PCOM:
            return
        if phi.h != lead.sb.digest or not phi.verify(self.registry):
            self._reject("PcomVoteG", BadConfirmation("vote for another superblock"))
            return
        lead.pcom_votes.setdefault(phi.clid, phi)
        lead.pcom_step = max(lead.pcom_step, msg.step)
        self._maybe_decide()

    def _maybe_decide(self):
        lead = self.lead
        if lead.decided or len(lead.pcom_votes) < self.needed:
            return
        lead.decided = True
        cert = c_combine(lead.pcom_votes.values(), self.needed, self.registry)
        view, step = self.view, lead.pcom_step + 1
        self.ctx.trace("certificate", layer="global", view=view, phase="pcom", sb=cert.h, step=step)
        msg = DecideG(lead.sb, cert, lead.path[:-1], step=step)
        for j in range(self.params.num_clusters):
            if j != self.cluster:
                for dst in global_targets(self.schedule, self.params, j, view):
                    self.ctx.send(dst, msg)
        self.on_decide(self.me, msg)

    # -- representative handlers ---------------------------------------------------------

    def on_prepare(self, src, msg: PrepareG):
        self.observe(msg.justify)
        self._learn_path(msg.path)
        self.absorb_claims(msg.claims)
        view = msg.view
        if view < self.view:
            return
        if view > self.view:
            self._defer(src, msg, Defer("future view"))
            return
        if not self.is_rep:
            return
        leader = self.schedule.global_leader_replica(view)
        if src != leader or (view, "prep") in self.signed:
            return
        step = msg.step + 1

        def prepared(sig):
            phi = ClusterConfirmation(msg.sb.digest, view, msg.ext.h2, msg.ext.v2, Phase.PREP, sig)
            self.ctx.send(leader, PrepVoteG(phi, step=step))

        try:
            self._cosign("prep", prepared, sb=msg.sb, ext=msg.ext, phi=msg.phi,
                         path=msg.path, claims=msg.claims)
        except Defer as d:
            self._defer(src, msg, d)
        except OrionError as exc:
            self._reject("PrepareG", exc, view)

    def on_precommit(self, src, msg: PrecommitG):
        cert = msg.cert
        try:
            check_certificate(cert, Phase.PREP, self.needed, self.registry)
        except OrionError as exc:
            self._reject("PrecommitG", exc, cert.v)
            return
        self._learn_path(msg.path, msg.sb)
        if cert.v < self.view:
            self._reject("PrecommitG", ViewMismatch(f"certificate for view {cert.v}"), cert.v)
            return
        self.observe(cert)
        if not self.is_rep or src != self.schedule.global_leader_replica(cert.v):
            return
        view, step = self.view, msg.step + 1
        leader = src

        def committed(sig):
            phi = ClusterConfirmation(cert.h, view, None, None, Phase.PCOM, sig)
            self.ctx.send(leader, PcomVoteG(phi, step=step))

        self._try_cosign("pcom", committed, cert=cert, sb=msg.sb, path=msg.path)

    # -- decide (every replica) -------------------------------------------------------------

    def on_decide(self, src, msg):
        sb, cert = msg.sb, msg.cert
        try:
            check_certificate(cert, Phase.PCOM, self.needed, self.registry)
            if cert.h != sb.digest:
                raise BadCertificate("certificate covers another superblock")
        except OrionError as exc:
            self._reject(msg.kind, exc, cert.v)
            return
        self.ctx.trace("decide_recv", layer="global", view=cert.v, step=msg.step,
                       sb=sb.digest, src=str(src), via=msg.kind)
        if isinstance(msg, DecideG) and self.schedule.representative(self.cluster, cert.v) == self.me:
            local = DecideLocal(sb, cert, msg.path, step=msg.step)
            for peer in self.peers():
                self.ctx.send(peer, local)
        self._learn_path(msg.path, sb)
        self._try_execute(src, sb, cert)
        if cert.v >= self.view:
            self.failures = 0
            self.enter_view(cert.v + 1, "decide", cert)

    def _try_execute(self, src, sb, cert):
        if sb.height <= self.chain.height:
            self.pending_decides.pop(sb.digest, None)
            return
        before = self.chain.height
        try:
            replies = self.chain.append_and_execute(sb, cert, None, self.reply_filter)
        except OrionError as exc:
            missing = getattr(exc, "missing", None)
            if missing is None:
                self._reject("decide", exc, cert.v)
                return
            if sb.digest not in self.pending_decides:
                self.ctx.set_timer(("fetch", sb.digest, 0), self.params.fetch_timeout)
            self.pending_decides[sb.digest] = (src, sb, cert)
            if src != self.me:
                self.ctx.send(src, BlockFetch(tuple(missing)))
            return
        self.pending_decides.pop(sb.digest, None)
        for s in self.chain.chain[before + 1:]:
            self.ctx.trace("commit", layer="global", view=s.view, height=s.height, sb=s.digest,
                           blocks=len(s.block_ids), cert_sb=cert.h)
        self.on_replies(replies)
        for digest, entry in list(self.pending_decides.items()):
            if entry[1].height <= self.chain.height:
                del self.pending_decides[digest]

    def _refetch(self, digest, attempt: int):
        entry = self.pending_decides.get(digest)
        if entry is None:
            return
        missing = self.chain.missing_for(digest) or []
        if not missing:
            self._try_execute(*entry)
            return
        req = BlockFetch(tuple(missing))
        for j in range(self.params.num_clusters):
            for dst in self.schedule.targets(j, self.params.f(j) + 1, attempt + 1):
                if dst != self.me:
                    self.ctx.send(dst, req)
        self.ctx.set_timer(("fetch", digest, attempt + 1), self.params.fetch_timeout)

    # -- dispatch ---------------------------------------------------------------------------

    def handle(self, src, msg):
        if isinstance(msg, CosignRequest):
            self.on_cosign_request(src, msg)
        elif isinstance(msg, CosignResponse):
            self.on_cosign_response(src, msg)
        elif isinstance(msg, NewViewG):
            self.on_newview(src, msg)
        elif isinstance(msg, PrepareG):
            self.on_prepare(src, msg)
        elif isinstance(msg, PrepVoteG):
            self.on_prep_vote(src, msg)
        elif isinstance(msg, PrecommitG):
            self.on_precommit(src, msg)
        elif isinstance(msg, PcomVoteG):
            self.on_pcom_vote(src, msg)
        elif isinstance(msg, (DecideG, DecideLocal)):
            self.on_decide(src, msg)
