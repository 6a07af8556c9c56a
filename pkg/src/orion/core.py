"""Domain types, canonical encoding, hashing and cluster signatures.

Everything in here is an immutable value. Digests and signatures are
computed over the canonical encoding produced by :func:`encode`, whose
byte layout is documented in ``docs/ENCODING.md``.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import ForeignSigner, InsufficientQuorum, MixedPayload

DIGEST_SIZE = 32


class Digest(bytes):
    """A 32-byte opaque hash value."""

    def __new__(cls, value: bytes = b"\0" * DIGEST_SIZE):
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self):
        return f"Digest({self.hex()[:12]})"

    @classmethod
    def fromhex(cls, text: str) -> "Digest":
        return cls(bytes.fromhex(text))


ZERO_DIGEST = Digest()


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


# -- canonical encoding -------------------------------------------------------

_U32 = struct.Struct(">I")
_I64 = struct.Struct(">q")


def encode(value) -> bytes:
    """Deterministic, length-prefixed, field-ordered binary encoding.

    Supported values: ``None``, ``bool``, ``int`` (signed 64-bit), ``bytes``,
    ``str``, enum members (encoded by value), tuples/lists, and any object with
    an ``encode_fields()`` method returning a tuple.
    """
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _encode_into(value, out: bytearray) -> None:
    if value is None:
        out += b"N"
    elif isinstance(value, bool):
        out += b"T" if value else b"F"
    elif isinstance(value, enum.Enum):
        _encode_into(value.value, out)
    elif isinstance(value, int):
        out += b"I"
        out += _I64.pack(value)
    elif isinstance(value, (bytes, bytearray)):
        out += b"B"
        out += _U32.pack(len(value))
        out += value
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += b"S"
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, (tuple, list)):
        out += b"L"
        out += _U32.pack(len(value))
        for item in value:
            _encode_into(item, out)
    elif hasattr(value, "encode_fields"):
        _encode_into(value.encode_fields(), out)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


# -- identities and data --------------------------------------------------------


@dataclass(frozen=True, order=True)
class ReplicaId:
    cluster: int
    index: int

    def __str__(self):
        return f"r{self.cluster}.{self.index}"

    def encode_fields(self):
        return ("rid", self.cluster, self.index)

    @classmethod
    def parse(cls, text: str) -> "ReplicaId":
        text = text[1:] if text.startswith("r") else text
        cluster, index = text.split(".")
        return cls(int(cluster), int(index))


@dataclass(frozen=True)
class Transaction:
    client: int
    seq: int
    payload: bytes

    def encode_fields(self):
        return ("tx", self.client, self.seq, self.payload)

    @cached_property
    def txid(self) -> Digest:
        return hash_bytes(encode(self))


@dataclass(frozen=True)
class Block:
    origin: int
    local_view: int
    parent: Digest
    txs: tuple = ()

    def encode_fields(self):
        return ("block", self.origin, self.local_view, self.parent, tuple(self.txs))

    @cached_property
    def digest(self) -> Digest:
        return hash_bytes(encode(self))


def genesis_block(cluster: int) -> Block:
    return Block(origin=cluster, local_view=0, parent=ZERO_DIGEST, txs=())


@dataclass(frozen=True)
class SuperBlock:
    prev: Digest
    height: int
    view: int
    block_ids: tuple = ()  # ((cluster, Digest), ...)

    def encode_fields(self):
        return ("superblock", self.prev, self.height, self.view,
                tuple((c, d) for c, d in self.block_ids))

    @cached_property
    def digest(self) -> Digest:
        return hash_bytes(encode(self))


GENESIS_SUPERBLOCK = SuperBlock(prev=ZERO_DIGEST, height=0, view=0, block_ids=())


class Phase(enum.Enum):
    NV = "nv_p"
    PREP = "prep_p"
    PCOM = "pcom_p"

    @property
    def rank(self) -> int:
        return _PHASE_RANK[self]


_PHASE_RANK = {Phase.NV: 0, Phase.PREP: 1, Phase.PCOM: 2}


# -- signatures -----------------------------------------------------------------


@dataclass(frozen=True, order=True)
class PartialSignature:
    signer: ReplicaId
    digest: Digest  # hash of the signed payload
    tag: bytes


@dataclass(frozen=True)
class ClusterSignature:
    cluster: int
    partials: tuple  # PartialSignature, sorted by signer

    @property
    def signers(self) -> tuple:
        return tuple(p.signer for p in self.partials)


class KeyRegistry:
    """Key directory for every replica of every cluster.

    ``scheme="ed25519"`` uses real signatures; ``scheme="sim"`` uses the tag
    ``H(payload digest || signer)``, which keeps tests fast and deterministic
    while exercising the same quorum logic. Private keys are derived from
    ``seed`` so a scenario is reproducible.
    """

    SCHEMES = ("sim", "ed25519")

    def __init__(self, cluster_sizes: Sequence[int], scheme: str = "sim",
                 seed: str = "orion", public_keys: Optional[dict] = None,
                 with_private: bool = True):
        if scheme not in self.SCHEMES:
            raise ValueError(f"unknown signature scheme {scheme!r}")
        self.cluster_sizes = tuple(cluster_sizes)
        self.scheme = scheme
        self.seed = seed
        self._private: dict = {}
        self._public: dict = {}
        self._cache: dict = {}
        if scheme == "ed25519":
            for rid in self.replicas():
                if public_keys and str(rid) in public_keys:
                    raw = bytes.fromhex(public_keys[str(rid)])
                    self._public[rid] = Ed25519PublicKey.from_public_bytes(raw)
                    continue
                sk = Ed25519PrivateKey.from_private_bytes(
                    hash_bytes(encode(("key", seed, rid))))
                if with_private:
                    self._private[rid] = sk
                self._public[rid] = sk.public_key()

    @classmethod
    def from_config(cls, cluster_sizes, conf: Optional[dict]) -> "KeyRegistry":
        conf = conf or {}
        return cls(cluster_sizes, scheme=conf.get("scheme", "sim"),
                   seed=conf.get("seed", "orion"),
                   public_keys=conf.get("public_keys"))

    def to_config(self) -> dict:
        conf = {"scheme": self.scheme, "seed": self.seed}
        if self.scheme == "ed25519":
            conf["public_keys"] = {
                str(rid): pk.public_bytes(Encoding.Raw, PublicFormat.Raw).hex()
                for rid, pk in sorted(self._public.items())}
        return conf

    def replicas(self, cluster: Optional[int] = None) -> list:
        clusters = range(len(self.cluster_sizes)) if cluster is None else [cluster]
        return [ReplicaId(c, k) for c in clusters for k in range(self.cluster_sizes[c])]

    def faults(self, cluster: int) -> int:
        return (self.cluster_sizes[cluster] - 1) // 3

    def quorum(self, cluster: int) -> int:
        return 2 * self.faults(cluster) + 1

    def knows(self, rid: ReplicaId) -> bool:
        return (0 <= rid.cluster < len(self.cluster_sizes)
                and 0 <= rid.index < self.cluster_sizes[rid.cluster])

    def tag(self, signer: ReplicaId, digest: Digest) -> bytes:
        if self.scheme == "sim":
            return bytes(hash_bytes(digest + encode(signer)))
        try:
            return self._private[signer].sign(digest)
        except KeyError:
            raise PermissionError(f"no private key for {signer}") from None

    def check_tag(self, signer: ReplicaId, digest: Digest, tag: bytes) -> bool:
        if not self.knows(signer):
            return False
        if self.scheme == "sim":
            return tag == hash_bytes(digest + encode(signer))
        try:
            self._public[signer].verify(tag, digest)
        except InvalidSignature:
            return False
        return True

    def cached(self, key, compute):
        try:
            return self._cache[key]
        except KeyError:
            result = self._cache[key] = compute()
            return result


def sign_partial(signer: ReplicaId, payload: bytes, registry: KeyRegistry) -> PartialSignature:
    digest = hash_bytes(payload)
    return PartialSignature(signer=signer, digest=digest, tag=registry.tag(signer, digest))


def verify_partial(partial: PartialSignature, payload: bytes, registry: KeyRegistry) -> bool:
    if partial.digest != hash_bytes(payload):
        return False
    return registry.cached(("p", partial.signer, partial.digest, partial.tag),
                           lambda: registry.check_tag(partial.signer, partial.digest, partial.tag))


def combine_cluster(partials: Iterable[PartialSignature], cluster: int, quorum: int,
                    registry: Optional[KeyRegistry] = None) -> ClusterSignature:
    """Build a cluster signature from at least ``quorum`` distinct signers.

    Extra partials beyond the quorum are kept; duplicates of one signer count
    once. With a registry, partials failing their own tag check are discarded
    before counting.
    """
    partials = list(partials)
    digests = {p.digest for p in partials}
    if len(digests) > 1:
        raise MixedPayload(f"{len(digests)} distinct payloads")
    by_signer = {}
    for p in partials:
        if p.signer.cluster != cluster:
            raise ForeignSigner(f"{p.signer} is not in cluster {cluster}")
        if registry is not None and not registry.check_tag(p.signer, p.digest, p.tag):
            continue
        by_signer.setdefault(p.signer, p)
    if len(by_signer) < quorum:
        raise InsufficientQuorum(f"{len(by_signer)} distinct signers, need {quorum}")
    return ClusterSignature(cluster=cluster,
                            partials=tuple(by_signer[s] for s in sorted(by_signer)))


def verify_cluster(sig: ClusterSignature, payload: bytes, registry: KeyRegistry) -> bool:
    if not isinstance(sig, ClusterSignature):
        return False
    if not 0 <= sig.cluster < len(registry.cluster_sizes):
        return False
    digest = hash_bytes(payload)
    return registry.cached(("c", sig, digest), lambda: _verify_cluster(sig, digest, registry))


def _verify_cluster(sig, digest, registry) -> bool:
    signers = set()
    for p in sig.partials:
        if p.signer.cluster != sig.cluster or p.signer in signers or p.digest != digest:
            return False
        if not registry.check_tag(p.signer, p.digest, p.tag):
            return False
        signers.add(p.signer)
    return len(signers) >= registry.quorum(sig.cluster)


# -- certificates -----------------------------------------------------------------


def vote_payload(phase: str, cluster: int, view: int, digest: Digest) -> bytes:
    """What a replica signs when voting in local consensus."""
    return encode(("hs", phase, cluster, view, digest))


@dataclass(frozen=True)
class QuorumCert:
    """Local consensus quorum certificate for one phase of one view."""

    phase: str
    cluster: int
    view: int
    block: Digest
    sig: Optional[ClusterSignature]  # None only for the genesis certificate

    @property
    def payload(self) -> bytes:
        return vote_payload(self.phase, self.cluster, self.view, self.block)

    def verify(self, registry: KeyRegistry) -> bool:
        if self.sig is None:
            return self.view == 0 and self.block == genesis_block(self.cluster).digest
        return self.sig.cluster == self.cluster and verify_cluster(self.sig, self.payload, registry)


@dataclass(frozen=True)
class LockCertificate:
    block: Digest
    cluster: int
    local_view: int
    sig: ClusterSignature

    @property
    def payload(self) -> bytes:
        return vote_payload("commit", self.cluster, self.local_view, self.block)

    def verify(self, registry: KeyRegistry) -> bool:
        return self.sig.cluster == self.cluster and verify_cluster(self.sig, self.payload, registry)


def confirmation_payload(h, v, h2, v2, ph: Phase) -> bytes:
    return encode(("phi", h, v, h2, v2, ph))


@dataclass(frozen=True)
class ClusterConfirmation:
    """A statement ``(h, v, h', v', ph)`` co-signed by a quorum of one cluster."""

    h: Optional[Digest]
    v: int
    h2: Optional[Digest]
    v2: Optional[int]
    ph: Phase
    sig: ClusterSignature

    @property
    def clid(self) -> int:
        return self.sig.cluster

    @property
    def payload(self) -> bytes:
        return confirmation_payload(self.h, self.v, self.h2, self.v2, self.ph)

    def verify(self, registry: KeyRegistry) -> bool:
        return verify_cluster(self.sig, self.payload, registry)


@dataclass(frozen=True)
class CombinedConfirmation:
    """Confirmations of one payload from several distinct clusters."""

    h: Optional[Digest]
    v: int
    h2: Optional[Digest]
    v2: Optional[int]
    ph: Phase
    sigs: tuple  # ClusterSignature, sorted by cluster

    @property
    def payload(self) -> bytes:
        return confirmation_payload(self.h, self.v, self.h2, self.v2, self.ph)

    @property
    def clusters(self) -> tuple:
        return tuple(s.cluster for s in self.sigs)

    def verify(self, registry: KeyRegistry, count: int) -> bool:
        clusters = self.clusters
        if len(set(clusters)) != len(clusters) or len(clusters) < count:
            return False
        payload = self.payload
        return all(verify_cluster(s, payload, registry) for s in self.sigs)


def ext_progress_payload(v, v2, h2, contributors) -> bytes:
    return encode(("ext", v, v2, h2, tuple(contributors)))


def ext_final_payload(v, v2, h2, count) -> bytes:
    return encode(("extf", v, v2, h2, count))


@dataclass(frozen=True)
class Extension:
    """Certified claim about the highest prepared superblock.

    In progress it lists contributing clusters; once finalized only their
    number is kept. Either way ``sig`` is by the leader cluster.
    """

    v: int
    v2: int
    h2: Digest
    sig: ClusterSignature
    contributors: Optional[tuple] = None
    count: Optional[int] = None

    @property
    def finalized(self) -> bool:
        return self.count is not None

    @property
    def payload(self) -> bytes:
        if self.finalized:
            return ext_final_payload(self.v, self.v2, self.h2, self.count)
        return ext_progress_payload(self.v, self.v2, self.h2, self.contributors)

    def verify(self, registry: KeyRegistry) -> bool:
        return verify_cluster(self.sig, self.payload, registry)
