import pytest

from orion.chain import ChainState, DurabilityTracker
from orion.core import (
    Block,
    LockCertificate,
    PartialSignature,
    ReplicaId,
    Transaction,
    combine_cluster,
    genesis_block,
    sign_partial,
    vote_payload,
)
from orion.dissemination import (
    DIRECT,
    BlockFetch,
    DisseminationMsg,
    Disseminator,
    StorageClaim,
    claim_payload,
)
from orion.errors import InvalidCert, NotDisseminator

from fakes import Bus


def locked_block(registry, cluster=0, lview=1):
    block = Block(cluster, lview, genesis_block(cluster).digest, (Transaction(1, lview, b"a=b"),))
    payload = vote_payload("commit", cluster, lview, block.digest)
    sig = combine_cluster([sign_partial(r, payload, registry) for r in registry.replicas(cluster)[:3]],
                          cluster, 3)
    return block, LockCertificate(block.digest, cluster, lview, sig)


def network():
    bus = Bus()
    nodes = {}
    for rid in bus.registry.replicas():
        chain = ChainState(3, 1, 6, durability=DurabilityTracker(bus.params.cluster_sizes))
        nodes[rid] = Disseminator(bus.ctx(rid), chain)
        bus.handlers[rid] = nodes[rid].handle
    return bus, nodes


def test_block_reaches_every_replica():
    bus, nodes = network()
    block, cert = locked_block(bus.registry)
    diss = bus.schedule.disseminator(0, 1, 0)
    for rid in bus.registry.replicas(0):
        nodes[rid].chain.blocks.add(block, cert, 0)
        nodes[rid].on_lock(block, cert, 0)
    bus.pump()
    assert all(block.digest in n.chain.blocks for n in nodes.values())
    direct = [m for s, _, m in bus.sent if m.kind == "Disseminate" and m.hop == DIRECT]
    # f+1 replicas in each of the three clusters, sent only by the disseminator
    assert len(direct) == 6 and {m.sender for m in direct} == {diss}
    relays = [m for s, _, m in bus.sent if m.kind == "Disseminate" and m.hop != DIRECT]
    assert len(relays) == 4 * 3  # two receivers per remote cluster relay to three peers each


def test_claims_make_blocks_durable():
    bus, nodes = network()
    block, cert = locked_block(bus.registry)
    for rid in bus.registry.replicas(0):
        nodes[rid].chain.blocks.add(block, cert, 0)
        nodes[rid].chain.durability.record_ack(block.digest, rid)
    # cluster-0 replicas exchange claims, then dissemination carries them out
    claims = tuple(nodes[r].my_claim() for r in bus.registry.replicas(0))
    for rid in bus.registry.replicas(0):
        nodes[rid].absorb_claims(claims)
    diss = bus.schedule.disseminator(0, 1, 0)
    nodes[diss].on_lock(block, cert, 0)
    bus.pump()
    remote = [n for r, n in nodes.items() if r.cluster != 0]
    assert all(n.chain.durability.storing_clusters(block.digest) >= {0} for n in remote)
    # replicas that saw two relays also count their own cluster
    assert any(n.chain.is_durable(block.digest) for n in remote)


def test_only_the_disseminator_sends():
    bus, nodes = network()
    block, cert = locked_block(bus.registry)
    diss = bus.schedule.disseminator(0, 1, 0)
    other = next(r for r in bus.registry.replicas(0) if r != diss)
    with pytest.raises(NotDisseminator):
        nodes[other].disseminate(block, cert, 0)
    bad = LockCertificate(block.digest, 0, 2, cert.sig)
    with pytest.raises(InvalidCert):
        nodes[bus.schedule.disseminator(0, 2, 0)].disseminate(block, bad, 0)


def test_invalid_lock_is_dropped():
    bus, nodes = network()
    block, cert = locked_block(bus.registry)
    forged = Block(0, 1, genesis_block(0).digest, (Transaction(9, 9, b"evil"),))
    target = ReplicaId(1, 0)
    msg = DisseminationMsg(forged, cert, ReplicaId(0, 2), DIRECT)
    assert nodes[target].on_receive_disseminated(ReplicaId(0, 2), msg) == []
    assert forged.digest not in nodes[target].chain.blocks


def test_claims_are_verified_and_monotonic():
    bus, nodes = network()
    node = nodes[ReplicaId(1, 0)]
    signer = ReplicaId(2, 1)
    d = genesis_block(2).digest
    claim = StorageClaim(5, (d,), sign_partial(signer, claim_payload(5, (d,)), bus.registry))
    node.absorb_claims([claim])
    assert node.claims[signer] is claim
    older = StorageClaim(3, (), sign_partial(signer, claim_payload(3, ()), bus.registry))
    node.absorb_claims([older])
    assert node.claims[signer] is claim
    forged = StorageClaim(9, (d,), PartialSignature(signer, claim.partial.digest, claim.partial.tag))
    node.absorb_claims([forged])
    assert node.claims[signer] is claim
    assert claim in node.claims_for([d])
    assert node.claims_for([]) == ()


def test_fetch_returns_stored_blocks():
    bus, nodes = network()
    block, cert = locked_block(bus.registry)
    holder, asker = ReplicaId(0, 1), ReplicaId(2, 2)
    nodes[holder].store(block, cert)
    bus.queue.append((asker, holder, BlockFetch((block.digest,))))
    bus.pump()
    assert block.digest in nodes[asker].chain.blocks
