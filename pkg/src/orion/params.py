from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

from .core import KeyRegistry, ReplicaId
from .roles import RoleSchedule


@dataclass(frozen=True)
class ProtocolParams:
    cluster_sizes: tuple
    block_size: int = 400
    k_max: Optional[int] = None  # defaults to 2 * N
    block_interval: int = 4000
    local_timeout: int = 6000
    global_timeout: int = 12000
    fetch_timeout: int = 4000
    max_backoff: int = 3  # cap on the timeout doubling exponent

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def F(self) -> int:
        return (self.num_clusters - 1) // 2

    @property
    def max_blocks(self) -> int:
        return self.k_max if self.k_max is not None else 2 * self.num_clusters

    def f(self, cluster: int) -> int:
        return (self.cluster_sizes[cluster] - 1) // 3

    def quorum(self, cluster: int) -> int:
        return 2 * self.f(cluster) + 1


class Context(Protocol):
    """What a replica's protocol components may do to the outside world.

    The simulator provides one implementation; nothing in the protocol
    modules assumes simulation beyond this surface.
    """

    me: ReplicaId
    params: ProtocolParams
    schedule: RoleSchedule
    registry: KeyRegistry

    def now(self) -> int: ...

    def send(self, dst: ReplicaId, msg) -> None: ...

    def set_timer(self, key, delay: int) -> None: ...

    def cancel_timer(self, key) -> None: ...

    def trace(self, kind: str, **fields) -> None: ...
