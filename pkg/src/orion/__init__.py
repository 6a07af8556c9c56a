"""Hierarchical Byzantine fault tolerant ordering for clustered replicas.

Clusters order transactions locally, spread locked blocks to other clusters,
and agree on superblocks through cluster-confirmed global consensus.
"""

from .core import (
    Block,
    ClusterSignature,
    Digest,
    KeyRegistry,
    ReplicaId,
    SuperBlock,
    Transaction,
    combine_cluster,
    encode,
    sign_partial,
    verify_cluster,
)
from .roles import RoleSchedule

__version__ = "0.1.0"

__all__ = ["Block", "ClusterSignature", "Digest", "KeyRegistry", "ReplicaId", "RoleSchedule",
           "SuperBlock", "Transaction", "combine_cluster", "encode", "sign_partial",
           "verify_cluster"]
