import pytest

from orion.core import (
    ClusterConfirmation,
    KeyRegistry,
    Phase,
    ReplicaId,
    hash_bytes,
    confirmation_payload,
)
from orion.global_consensus import create_cluster_sign


def digest_of(label) -> bytes:
    return hash_bytes(repr(label).encode())


def confirm(registry, cluster, h, v, h2, v2, ph, signers=None):
    """A confirmation co-signed by ``signers`` (default: the whole cluster)."""
    payload = confirmation_payload(h, v, h2, v2, ph)
    if signers is None:
        signers = registry.replicas(cluster)
    sig = create_cluster_sign(cluster, payload, signers, registry)
    return ClusterConfirmation(h, v, h2, v2, ph, sig)


def newview(registry, cluster, view, v2, h2=None):
    return confirm(registry, cluster, None, view, h2 if h2 is not None else digest_of(("sb", v2)),
                   v2, Phase.NV)


@pytest.fixture
def registry():
    return KeyRegistry((4, 4, 4))


@pytest.fixture
def rid():
    return ReplicaId


# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: list = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
