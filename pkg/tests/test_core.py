import hashlib
import struct
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orion.core import (
    GENESIS_SUPERBLOCK,
    Block,
    ClusterSignature,
    CombinedConfirmation,
    Digest,
    KeyRegistry,
    LockCertificate,
    PartialSignature,
    Phase,
    QuorumCert,
    ReplicaId,
    SuperBlock,
    Transaction,
    combine_cluster,
    encode,
    genesis_block,
    hash_bytes,
    sign_partial,
    verify_cluster,
    verify_partial,
    vote_payload,
)
from orion.errors import ForeignSigner, InsufficientQuorum, MixedPayload

from conftest import confirm, digest_of


# -- encoding --------------------------------------------------------------------


def reference_encode(value) -> bytes:
    """Independent encoder written from the byte layout table."""
    if value is None:
        return b"N"
    if value is True:
        return b"T"
    if value is False:
        return b"F"
    if isinstance(value, int):
        return b"I" + struct.pack(">q", value)
    if isinstance(value, bytes):
        return b"B" + struct.pack(">I", len(value)) + value
    if isinstance(value, str):
        raw = value.encode()
        return b"S" + struct.pack(">I", len(raw)) + raw
    return b"L" + struct.pack(">I", len(value)) + b"".join(reference_encode(v) for v in value)


values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2 ** 63), 2 ** 63 - 1) | st.binary(max_size=40)
    | st.text(max_size=20),
    lambda inner: st.tuples(inner, inner) | st.lists(inner, max_size=4).map(tuple),
    max_leaves=12)


@given(values)
def test_encode_matches_reference_layout(value):
    assert encode(value) == reference_encode(value)


@given(values, values)
def test_equal_encodings_imply_equal_values(a, b):
    if encode(a) == encode(b):
        assert a == b


def test_encode_known_bytes():
    assert encode(("ab", 1)) == b"L\x00\x00\x00\x02S\x00\x00\x00\x02abI" + b"\x00" * 7 + b"\x01"
    assert encode(Phase.PREP) == encode("prep_p")


def test_encode_rejects_unknown_types():
    with pytest.raises(TypeError):
        encode(1.5)


def test_digest_is_sha256_of_encoding():
    block = Block(0, 3, genesis_block(0).digest, (Transaction(1, 2, b"k=v"),))
    assert block.digest == hashlib.sha256(encode(block)).digest()
    assert len(block.digest) == 32
    with pytest.raises(ValueError):
        Digest(b"short")


def test_domain_types_do_not_collide():
    tx = Transaction(0, 0, b"")
    block = Block(0, 0, Digest(), ())
    assert len({tx.txid, block.digest, GENESIS_SUPERBLOCK.digest}) == 3
    assert genesis_block(0).digest != genesis_block(1).digest


@given(st.integers(0, 4), st.integers(0, 20))
def test_replica_id_roundtrip(cluster, index):
    rid = ReplicaId(cluster, index)
    assert ReplicaId.parse(str(rid)) == rid


# -- partial and cluster signatures -----------------------------------------------


@pytest.mark.parametrize("scheme", ["sim", "ed25519"])
def test_partial_sign_verify(scheme):
    reg = KeyRegistry((4,), scheme=scheme)
    p = sign_partial(ReplicaId(0, 1), b"payload", reg)
    assert verify_partial(p, b"payload", reg)
    assert not verify_partial(p, b"other", reg)
    forged = PartialSignature(ReplicaId(0, 2), p.digest, p.tag)
    assert not verify_partial(forged, b"payload", reg)


def test_ed25519_public_registry_verifies_but_cannot_sign():
    full = KeyRegistry((4,), scheme="ed25519", seed="s")
    public = KeyRegistry.from_config((4,), full.to_config())
    sig = combine_cluster([sign_partial(r, b"x", full) for r in full.replicas(0)[:3]], 0, 3)
    assert verify_cluster(sig, b"x", public)
    verifier = KeyRegistry((4,), scheme="ed25519", seed="s", with_private=False)
    with pytest.raises(PermissionError):
        sign_partial(ReplicaId(0, 0), b"x", verifier)


@pytest.mark.parametrize("scheme", ["sim", "ed25519"])
def test_cluster_signature_exhaustive_n4(scheme):
    reg = KeyRegistry((4, 4), scheme=scheme)
    payload = b"statement"
    members = reg.replicas(0)
    for size in range(0, 5):
        for subset in combinations(members, size):
            partials = [sign_partial(r, payload, reg) for r in subset]
            if size >= 3:
                sig = combine_cluster(partials, 0, reg.quorum(0), reg)
                assert verify_cluster(sig, payload, reg)
            else:
                with pytest.raises(InsufficientQuorum):
                    combine_cluster(partials, 0, reg.quorum(0), reg)
                # even a hand-built signature from too few signers does not verify
                forged = ClusterSignature(0, tuple(sorted(partials)))
                assert not verify_cluster(forged, payload, reg)


def test_cluster_signature_rejects_mixing_and_foreigners(registry):
    a = [sign_partial(r, b"a", registry) for r in registry.replicas(0)]
    b = sign_partial(ReplicaId(0, 3), b"b", registry)
    with pytest.raises(MixedPayload):
        combine_cluster(a[:2] + [b], 0, 3)
    with pytest.raises(ForeignSigner):
        combine_cluster(a[:2] + [sign_partial(ReplicaId(1, 0), b"a", registry)], 0, 3)
    # duplicates of one signer count once
    with pytest.raises(InsufficientQuorum):
        combine_cluster([a[0], a[0], a[1]], 0, 3)
    # a partial with a bad tag is dropped when a registry is given
    bad = PartialSignature(a[2].signer, a[2].digest, b"\0" * 32)
    with pytest.raises(InsufficientQuorum):
        combine_cluster([a[0], a[1], bad], 0, 3, registry)


def test_cluster_signature_does_not_transfer_between_payloads(registry):
    sig = combine_cluster([sign_partial(r, b"a", registry) for r in registry.replicas(0)], 0, 3)
    assert verify_cluster(sig, b"a", registry)
    assert not verify_cluster(sig, b"b", registry)
    moved = ClusterSignature(1, sig.partials)
    assert not verify_cluster(moved, b"a", registry)


@settings(max_examples=60)
@given(st.sets(st.integers(0, 6), max_size=7), st.sets(st.integers(0, 6), max_size=7))
def test_quorum_threshold_property_n7(honest, byzantine):
    """Signatures verify iff at least 2f+1 distinct signers; forging needs real tags."""
    reg = KeyRegistry((7,))
    payload = b"p"
    partials = [sign_partial(ReplicaId(0, i), payload, reg) for i in sorted(honest)]
    forged = [PartialSignature(ReplicaId(0, i), hash_bytes(payload), b"\1" * 32)
              for i in sorted(byzantine - honest)]
    sig = ClusterSignature(0, tuple(sorted(partials + forged)))
    assert verify_cluster(sig, payload, reg) == (not forged and len(honest) >= 5)


# -- certificates -------------------------------------------------------------------


def test_quorum_and_lock_certificates(registry):
    d = digest_of("block")
    payload = vote_payload("prepare", 0, 4, d)
    sig = combine_cluster([sign_partial(r, payload, registry) for r in registry.replicas(0)[:3]], 0, 3)
    qc = QuorumCert("prepare", 0, 4, d, sig)
    assert qc.verify(registry)
    assert not QuorumCert("prepare", 0, 5, d, sig).verify(registry)
    assert QuorumCert("prepare", 0, 0, genesis_block(0).digest, None).verify(registry)
    lock_payload = vote_payload("commit", 0, 4, d)
    lsig = combine_cluster([sign_partial(r, lock_payload, registry) for r in registry.replicas(0)], 0, 3)
    assert LockCertificate(d, 0, 4, lsig).verify(registry)
    assert not LockCertificate(d, 1, 4, lsig).verify(registry)


def test_combined_confirmation_needs_distinct_clusters(registry):
    h = digest_of("sb")
    confs = [confirm(registry, c, h, 3, None, None, Phase.PCOM) for c in range(3)]
    cert = CombinedConfirmation(h, 3, None, None, Phase.PCOM, tuple(p.sig for p in confs[:2]))
    assert cert.verify(registry, 2)
    assert not cert.verify(registry, 3)
    twice = CombinedConfirmation(h, 3, None, None, Phase.PCOM, (confs[0].sig, confs[0].sig))
    assert not twice.verify(registry, 2)
    other = CombinedConfirmation(digest_of("x"), 3, None, None, Phase.PCOM, cert.sigs)
    assert not other.verify(registry, 2)


def test_superblock_digest_covers_every_field():
    base = SuperBlock(Digest(), 1, 2, ((0, digest_of(1)),))
    variants = [SuperBlock(digest_of(0), 1, 2, base.block_ids), SuperBlock(Digest(), 2, 2, base.block_ids),
                SuperBlock(Digest(), 1, 3, base.block_ids), SuperBlock(Digest(), 1, 2, ((1, digest_of(1)),))]
    assert len({base.digest, *(v.digest for v in variants)}) == 5
