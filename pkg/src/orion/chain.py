"""Per-replica block and superblock storage, validation and execution."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .core import (
    GENESIS_SUPERBLOCK,
    Block,
    CombinedConfirmation,
    Digest,
    KeyRegistry,
    LockCertificate,
    Phase,
    ReplicaId,
    SuperBlock,
    Transaction,
    encode,
    genesis_block,
    hash_bytes,
)
from .errors import InvalidCert, MissingBlockData


class BlockStore:
    """Verified locked blocks, append-only."""

    def __init__(self):
        self._entries: dict = {}
        self._child: dict = {}  # parent digest -> locked child digest

    def __contains__(self, digest) -> bool:
        return digest in self._entries

    def __len__(self):
        return len(self._entries)

    def add(self, block: Block, cert: LockCertificate, at: int) -> bool:
        """Store a block whose lock was already verified. False if known."""
        digest = block.digest
        if digest in self._entries:
            return False
        self._entries[digest] = (block, cert, at)
        self._child.setdefault(block.parent, digest)
        return True

    def block(self, digest) -> Optional[Block]:
        entry = self._entries.get(digest)
        return entry[0] if entry else None

    def cert(self, digest) -> Optional[LockCertificate]:
        entry = self._entries.get(digest)
        return entry[1] if entry else None

    def child(self, digest) -> Optional[Digest]:
        return self._child.get(digest)

    def digests(self):
        return self._entries.keys()


class DurabilityTracker:
    """Which clusters are known to store which blocks.

    A cluster counts as storing a block once ``f_j + 1`` of its replicas
    acknowledged storage, so at least one healthy replica holds it.
    """

    def __init__(self, cluster_sizes):
        self.cluster_sizes = tuple(cluster_sizes)
        self._acks: dict = {}
        self._clusters: dict = {}

    def record_ack(self, digest, replica: ReplicaId) -> None:
        per_cluster = self._acks.setdefault(digest, {})
        signers = per_cluster.setdefault(replica.cluster, set())
        if replica.index in signers:
            return
        signers.add(replica.index)
        needed = (self.cluster_sizes[replica.cluster] - 1) // 3 + 1
        if len(signers) >= needed:
            self.record_durability(digest, replica.cluster)

    def record_durability(self, digest, cluster: int) -> None:
        self._clusters.setdefault(digest, set()).add(cluster)

    def storing_clusters(self, digest) -> frozenset:
        return frozenset(self._clusters.get(digest, ()))

    def is_durable(self, digest, needed: int) -> bool:
        return len(self._clusters.get(digest, ())) >= needed


@dataclass(frozen=True)
class Summary:
    """Per-cluster inclusion state along one superblock's ancestry."""

    last: tuple  # per cluster: digest of the last included block
    included: frozenset


class SuperblockStore:
    def __init__(self, num_clusters: int):
        self.num_clusters = num_clusters
        self._bodies = {GENESIS_SUPERBLOCK.digest: GENESIS_SUPERBLOCK}
        self._summaries = {GENESIS_SUPERBLOCK.digest: Summary(
            last=tuple(genesis_block(c).digest for c in range(num_clusters)),
            included=frozenset())}

    def __contains__(self, digest):
        return digest in self._bodies

    def get(self, digest) -> Optional[SuperBlock]:
        return self._bodies.get(digest)

    def add(self, sb: SuperBlock) -> None:
        self._bodies.setdefault(sb.digest, sb)

    def add_path(self, bodies: Iterable[SuperBlock]) -> None:
        for sb in bodies:
            self.add(sb)

    def path(self, digest) -> Optional[list]:
        """Superblocks from genesis to ``digest`` inclusive, or None on a gap."""
        out = []
        cur = self._bodies.get(digest)
        while cur is not None:
            out.append(cur)
            if cur.height == 0:
                return out[::-1] if cur == GENESIS_SUPERBLOCK else None
            nxt = self._bodies.get(cur.prev)
            if nxt is None or nxt.height != cur.height - 1:
                return None
            cur = nxt
        return None

    def tail(self, digest, depth: int = 8) -> list:
        """Up to ``depth`` most recent bodies ending at ``digest`` (oldest first)."""
        out = []
        cur = self._bodies.get(digest)
        while cur is not None and cur.height > 0 and len(out) < depth:
            out.append(cur)
            cur = self._bodies.get(cur.prev)
        return out[::-1]

    def summary(self, digest) -> Optional[Summary]:
        if digest in self._summaries:
            return self._summaries[digest]
        path = self.path(digest)
        if path is None:
            return None
        start = max(i for i, sb in enumerate(path) if sb.digest in self._summaries)
        summ = self._summaries[path[start].digest]
        for sb in path[start + 1:]:
            last = list(summ.last)
            for cluster, d in sb.block_ids:
                last[cluster] = d
            summ = Summary(last=tuple(last),
                           included=summ.included | {d for _, d in sb.block_ids})
            self._summaries[sb.digest] = summ
        return summ


@dataclass(frozen=True)
class ClientReply:
    client: int
    seq: int
    txid: Digest
    height: int
    result: bytes


def select_blocks(pending: dict, durable: Callable[[Digest], bool], k_max: int) -> list:
    """Round-robin over clusters, taking durable prefixes of each pending list.

    ``pending`` maps cluster -> digests in local order. A candidate that is
    not durable closes its cluster for this superblock, so every cluster's
    contribution stays a gap-free prefix.
    """
    cursors = {c: 0 for c in sorted(pending)}
    chosen = []
    while len(chosen) < k_max and cursors:
        for cluster in list(cursors):
            if len(chosen) >= k_max:
                break
            i = cursors[cluster]
            blocks = pending[cluster]
            if i >= len(blocks) or not durable(blocks[i]):
                del cursors[cluster]
                continue
            chosen.append((cluster, blocks[i]))
            cursors[cluster] = i + 1
    return chosen


def execute_tx(kv: dict, tx) -> bytes:
    """Apply one transaction; payloads are ``key=value`` writes."""
    key, sep, value = tx.payload.partition(b"=")
    if not sep:
        return b"noop"
    previous = kv.get(key, b"")
    kv[key] = value
    return previous


class ChainState:
    """One replica's committed superblock chain and application state."""

    def __init__(self, num_clusters: int, F: int, k_max: int,
                 blocks: Optional[BlockStore] = None,
                 durability: Optional[DurabilityTracker] = None,
                 superblocks: Optional[SuperblockStore] = None):
        self.num_clusters = num_clusters
        self.F = F
        self.k_max = k_max
        self.blocks = blocks if blocks is not None else BlockStore()
        self.durability = durability
        self.superblocks = superblocks if superblocks is not None else SuperblockStore(num_clusters)
        self.chain = [GENESIS_SUPERBLOCK]
        self.certs = [None]
        self.executed: dict = {}  # txid -> (height, result)
        self.exec_log: list = []  # txids in execution order
        self.kv: dict = {}
        self.committed: set = set()

    @property
    def head(self) -> SuperBlock:
        return self.chain[-1]

    @property
    def height(self) -> int:
        return self.head.height

    def is_durable(self, digest) -> bool:
        if self.durability is None:
            return True
        return self.durability.is_durable(digest, self.F + 1)

    # -- validation ------------------------------------------------------------

    def superblock_problem(self, sb: SuperBlock) -> Optional[str]:
        """Why ``sb`` is not acceptable on top of its parent, or None."""
        parent = self.superblocks.get(sb.prev)
        if parent is None:
            return "unknown parent"
        if sb.height != parent.height + 1:
            return "height mismatch"
        if len(sb.block_ids) > self.k_max:
            return "too many blocks"
        if sb.height < len(self.chain) and self.chain[sb.height].digest != sb.digest:
            return "conflicts with committed chain"
        anchor = min(parent.height, self.height)
        path = self.superblocks.path(sb.prev)
        if path is None:
            return "ancestry unknown"
        if path[anchor].digest != self.chain[anchor].digest:
            return "ancestry conflicts with committed chain"
        summ = self.superblocks.summary(sb.prev)
        last = list(summ.last)
        seen = set()
        for cluster, digest in sb.block_ids:
            if not 0 <= cluster < self.num_clusters:
                return "bad cluster index"
            if digest in seen or digest in summ.included:
                return "block already included"
            seen.add(digest)
            block = self.blocks.block(digest)
            if block is None:
                return "block unavailable"
            if block.origin != cluster:
                return "block origin mismatch"
            if block.parent != last[cluster]:
                return "local order violated"
            last[cluster] = digest
            if not self.is_durable(digest):
                return "block not durable"
        return None

    def validate_superblock(self, sb: SuperBlock) -> bool:
        return self.superblock_problem(sb) is None

    # -- selection -------------------------------------------------------------

    def pending_blocks(self, cluster: int, after: Optional[Digest] = None) -> list:
        """Locked blocks of ``cluster`` not yet included, in local order.

        ``after`` is the last included block of that cluster; by default it is
        taken from the committed chain.
        """
        if after is None:
            after = self.superblocks.summary(self.head.digest).last[cluster]
        out = []
        cur = self.blocks.child(after)
        while cur is not None:
            if self.blocks.block(cur).origin != cluster:
                break
            out.append(cur)
            cur = self.blocks.child(cur)
        return out

    def propose_ids(self, prev: Digest) -> list:
        summ = self.superblocks.summary(prev)
        if summ is None:
            return []
        pending = {c: self.pending_blocks(c, summ.last[c]) for c in range(self.num_clusters)}
        return select_blocks(pending, self.is_durable, self.k_max)

    # -- execution -------------------------------------------------------------

    def missing_for(self, digest) -> Optional[list]:
        """Block digests needed before ``digest`` can be executed; None if its ancestry is unknown."""
        path = self.superblocks.path(digest)
        if path is None:
            return None
        return [d for sb in path[len(self.chain):] for _, d in sb.block_ids
                if d not in self.blocks]

    def append_and_execute(self, sb: SuperBlock, cert: CombinedConfirmation,
                           registry: Optional[KeyRegistry] = None,
                           reply_filter: Callable = lambda block, tx: True) -> list:
        """Commit ``sb`` (and any uncommitted ancestors) and execute them.

        Raises InvalidCert if the decide certificate does not match, and
        MissingBlockData if referenced blocks are not stored yet.
        """
        if cert is not None:
            if cert.h != sb.digest or cert.ph is not Phase.PCOM:
                raise InvalidCert("decide certificate does not cover this superblock")
            if registry is not None and not cert.verify(registry, self.F + 1):
                raise InvalidCert("decide certificate does not verify")
        self.superblocks.add(sb)
        if sb.height < len(self.chain):
            if self.chain[sb.height].digest != sb.digest:
                raise InvalidCert("decide conflicts with committed chain")
            return []
        path = self.superblocks.path(sb.digest)
        if path is None:
            raise MissingBlockData([sb.prev])
        if path[len(self.chain) - 1].digest != self.head.digest:
            raise InvalidCert("decide does not extend committed chain")
        todo = path[len(self.chain):]
        missing = [d for s in todo for _, d in s.block_ids if d not in self.blocks]
        if missing:
            raise MissingBlockData(missing)
        replies = []
        for s in todo:
            replies.extend(self._execute(s, reply_filter))
            self.chain.append(s)
            self.certs.append(cert if s is todo[-1] else None)
        return replies

    def _execute(self, sb: SuperBlock, reply_filter) -> list:
        replies = []
        for _, digest in sb.block_ids:
            block = self.blocks.block(digest)
            self.committed.add(digest)
            for tx in block.txs:
                if tx.txid in self.executed:
                    continue
                result = execute_tx(self.kv, tx)
                self.executed[tx.txid] = (sb.height, result)
                self.exec_log.append(tx.txid)
                if reply_filter(block, tx):
                    replies.append(ClientReply(tx.client, tx.seq, tx.txid, sb.height, result))
        return replies

    def state_bytes(self) -> bytes:
        return encode((tuple(sorted(self.kv.items())), tuple(self.exec_log)))

    def export(self) -> list:
        """Line-delimited chain records, genesis excluded."""
        return [export_record(sb) for sb in self.chain[1:]]


def export_record(sb: SuperBlock) -> str:
    return json.dumps({
        "height": sb.height,
        "digest": sb.digest.hex(),
        "prev": sb.prev.hex(),
        "view": sb.view,
        "block_ids": [[c, d.hex()] for c, d in sb.block_ids],
    }, sort_keys=True)


def parse_record(line: str) -> SuperBlock:
    rec = json.loads(line)
    sb = SuperBlock(prev=Digest.fromhex(rec["prev"]), height=rec["height"], view=rec["view"],
                    block_ids=tuple((c, Digest.fromhex(d)) for c, d in rec["block_ids"]))
    if sb.digest.hex() != rec["digest"]:
        raise ValueError(f"record at height {sb.height} does not match its digest")
    return sb


def block_record(block: Block) -> str:
    return json.dumps({
        "digest": block.digest.hex(),
        "origin": block.origin,
        "local_view": block.local_view,
        "parent": block.parent.hex(),
        "txs": [[tx.client, tx.seq, tx.payload.hex()] for tx in block.txs],
    }, sort_keys=True)


def parse_block(line: str) -> Block:
    rec = json.loads(line)
    block = Block(rec["origin"], rec["local_view"], Digest.fromhex(rec["parent"]),
                  tuple(Transaction(c, s, bytes.fromhex(p)) for c, s, p in rec["txs"]))
    if block.digest.hex() != rec["digest"]:
        raise ValueError(f"block record {rec['digest'][:12]} does not match its digest")
    return block


def replay(lines: Iterable[str], blocks: BlockStore, num_clusters: int) -> bytes:
    """Re-execute an exported chain from genesis and return the state bytes."""
    if not isinstance(blocks, BlockStore):
        store = BlockStore()
        for block in blocks:
            store.add(block, None, 0)
        blocks = store
    state = ChainState(num_clusters, F=0, k_max=1 << 30, blocks=blocks)
    for line in lines:
        sb = parse_record(line)
        if sb.prev != state.head.digest:
            raise ValueError(f"chain break at height {sb.height}")
        state.append_and_execute(sb, None)
    return state.state_bytes()


def state_digest(state: ChainState) -> Digest:
    return hash_bytes(state.state_bytes())
