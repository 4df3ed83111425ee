"""Two-level super-peer overlay of fog nodes.

Fogs are partitioned into ``b+1`` pools. The lowest id in each pool is the
pool's *buddy* (first-level super-peer); the remaining pool members are its
*neighbors* (second level). Every fog can rebuild the identical topology from
the same configuration, so no discovery protocol is needed: sorted fog ids
are split into contiguous, balanced chunks, one pool per chunk.

With ``p`` fogs evenly divisible into pools, each buddy has exactly
``p/(b+1) - 1`` neighbors, and any fog is reachable from any other in at
most 2 fog hops (buddy, then that buddy's neighbor).
"""

from dataclasses import dataclass, field
from enum import Enum

from .errors import InvalidConfigError, NotFoundError, WrongRoleError


class FogRole(str, Enum):
    BUDDY = "buddy"
    NEIGHBOR = "neighbor"


class RouteClass(str, Enum):
    SELF = "self"
    NEIGHBOR = "neighbor"
    BUDDY = "buddy"
    BUDDY_NEIGHBOR = "buddy_neighbor"


@dataclass(frozen=True)
class FogDescriptor:
    fog_id: int
    role: FogRole
    pool_buddy_id: int  # the buddy this fog reports to (itself for buddies)
    host: str = ""
    port: int = 0


@dataclass(frozen=True)
class OverlayTopology:
    fogs: dict[int, FogDescriptor]
    buddy_set: tuple[int, ...]
    neighbor_map: dict[int, tuple[int, ...]]  # buddy id -> its neighbors
    _pool_of: dict[int, int] = field(default_factory=dict, repr=False)

    @property
    def fog_count(self) -> int:
        return len(self.fogs)

    def is_buddy(self, fog_id: int) -> bool:
        self._require(fog_id)
        return fog_id in self.neighbor_map

    def pool_buddy_of(self, fog_id: int) -> int:
        self._require(fog_id)
        return self._pool_of[fog_id]

    def pool_members(self, fog_id: int) -> tuple[int, ...]:
        """All fogs in ``fog_id``'s pool (buddy included), ascending."""
        buddy = self.pool_buddy_of(fog_id)
        return tuple(sorted((buddy,) + self.neighbor_map[buddy]))

    def _require(self, fog_id: int) -> None:
        if fog_id not in self.fogs:
            raise NotFoundError(f"unknown fog {fog_id}")


def build_overlay(fog_ids: list[int], b: int) -> OverlayTopology:
    """Deterministically derive the overlay from the fog id list.

    Sorted ids are split into ``b+1`` contiguous chunks whose sizes differ by
    at most one; the first id of each chunk becomes the chunk's buddy and the
    rest its neighbors.
    """
    if not fog_ids:
        raise InvalidConfigError("at least one fog is required")
    ids = sorted(fog_ids)
    if len(set(ids)) != len(ids):
        raise InvalidConfigError("fog ids must be unique")
    p = len(ids)
    if b < 0 or b >= p:
        raise InvalidConfigError(f"buddy parameter b={b} out of range for {p} fogs")

    pools = b + 1
    base, extra = divmod(p, pools)
    fogs: dict[int, FogDescriptor] = {}
    buddies: list[int] = []
    neighbor_map: dict[int, tuple[int, ...]] = {}
    pool_of: dict[int, int] = {}
    start = 0
    for i in range(pools):
        size = base + (1 if i < extra else 0)
        chunk = ids[start : start + size]
        start += size
        buddy = chunk[0]
        neighbors = tuple(chunk[1:])
        buddies.append(buddy)
        neighbor_map[buddy] = neighbors
        fogs[buddy] = FogDescriptor(buddy, FogRole.BUDDY, buddy)
        pool_of[buddy] = buddy
        for n in neighbors:
            fogs[n] = FogDescriptor(n, FogRole.NEIGHBOR, buddy)
            pool_of[n] = buddy
    return OverlayTopology(fogs, tuple(buddies), neighbor_map, pool_of)


def buddies_of(t: OverlayTopology, f: int) -> list[int]:
    """The other first-level fogs, ascending. ``f`` must itself be a buddy."""
    if f not in t.fogs:
        raise NotFoundError(f"unknown fog {f}")
    if f not in t.neighbor_map:
        raise WrongRoleError(f"fog {f} is a neighbor, not a buddy")
    return [x for x in t.buddy_set if x != f]


def neighbors_of(t: OverlayTopology, f: int) -> list[int]:
    """The buddy's second-level pool members, ascending."""
    if f not in t.fogs:
        raise NotFoundError(f"unknown fog {f}")
    if f not in t.neighbor_map:
        raise WrongRoleError(f"fog {f} is a neighbor, not a buddy")
    return sorted(t.neighbor_map[f])


def route_class(t: OverlayTopology, src: int, dst: int) -> RouteClass:
    """Classify the forwarding relationship between two fogs."""
    for fog in (src, dst):
        if fog not in t.fogs:
            raise NotFoundError(f"unknown fog {fog}")
    if src == dst:
        return RouteClass.SELF
    pool_buddy = t.pool_buddy_of(src)
    if dst in t.neighbor_map[pool_buddy]:
        return RouteClass.NEIGHBOR
    if dst in t.buddy_set:
        return RouteClass.BUDDY
    return RouteClass.BUDDY_NEIGHBOR
