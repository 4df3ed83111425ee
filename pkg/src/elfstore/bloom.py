"""Per-property Bloom filters, exact partition indexes, and search planning.

Every fog keeps one 160-bit filter per property name, at three tiers:

* ``local``    -- values indexed in this fog's own partition,
* ``neighbor`` -- local filters received from the other fogs in its pool,
* ``buddy``    -- recursive filters (OR of a whole pool) from other buddies.

All filters share the fixed 160-bit width so they merge by bitwise OR. The
membership test is the standard subset check ``bits & mask == mask``: it can
return false positives but never false negatives, which is what lets the
search planner prune fogs safely. Filters never support deletion, so only
static properties are ever inserted.
"""

import hashlib
from dataclasses import dataclass, field

from .errors import InvalidMergeError

FILTER_BITS = 160
FILTER_BYTES = FILTER_BITS // 8
HASH_COUNT = 5
_MASK_ALL = (1 << FILTER_BITS) - 1

# Reserved property names every stored block is indexed under.
PROP_BLOCK_ID = "blockId"
PROP_STREAM_ID = "streamId"

Value = str | int | float | bool


def canonical_value(v: Value) -> str:
    """Canonical string form of a property value.

    Every fog must hash and index the identical byte sequence, so numbers are
    rendered in shortest round-trip decimal form and strings pass through
    unchanged.
    """
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    if isinstance(v, (int, float)):
        return repr(v)
    raise TypeError(f"unsupported property value type: {type(v).__name__}")


def hash_value(v: str) -> int:
    """160-bit membership mask for a canonical value string.

    The five leading big-endian 16-bit words of SHA-1(UTF-8(v)) are each
    reduced modulo 160 to select bit positions; colliding positions simply
    leave fewer bits set, so popcount is in [1, 5].
    """
    digest = hashlib.sha1(v.encode("utf-8")).digest()
    mask = 0
    for i in range(0, 2 * HASH_COUNT, 2):
        pos = int.from_bytes(digest[i : i + 2], "big") % FILTER_BITS
        mask |= 1 << pos
    return mask


@dataclass
class PropertyBloomFilter:
    property_name: str
    bits: int = 0
    insert_count: int = 0

    def insert(self, v: Value) -> None:
        self.bits |= hash_value(canonical_value(v))
        self.insert_count += 1

    def may_contain(self, v: Value) -> bool:
        mask = hash_value(canonical_value(v))
        return self.bits & mask == mask

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(FILTER_BYTES, "big")

    @classmethod
    def from_bytes(cls, property_name: str, payload: bytes) -> "PropertyBloomFilter":
        if len(payload) != FILTER_BYTES:
            raise InvalidMergeError(f"filter payload must be {FILTER_BYTES} bytes")
        return cls(property_name, int.from_bytes(payload, "big") & _MASK_ALL)

    def copy(self) -> "PropertyBloomFilter":
        return PropertyBloomFilter(self.property_name, self.bits, self.insert_count)


def merge_filters(
    local: PropertyBloomFilter, others: list[PropertyBloomFilter]
) -> PropertyBloomFilter:
    """Bitwise-OR merge used to build a pool's recursive (buddy) filter."""
    merged = local.copy()
    for f in others:
        if f.property_name != local.property_name:
            raise InvalidMergeError(
                f"cannot merge filter for {f.property_name!r} into {local.property_name!r}"
            )
        merged.bits |= f.bits
    return merged


@dataclass
class SearchPlan:
    local_hit: bool
    candidate_neighbors: set[int]
    candidate_buddies: set[int]


class FilterSet:
    """One fog's three-tier filter state."""

    def __init__(self) -> None:
        self.local: dict[str, PropertyBloomFilter] = {}
        self.neighbor: dict[int, dict[str, PropertyBloomFilter]] = {}
        self.buddy: dict[int, dict[str, PropertyBloomFilter]] = {}

    def insert_local(self, name: str, value: Value) -> None:
        f = self.local.get(name)
        if f is None:
            f = self.local[name] = PropertyBloomFilter(name)
        f.insert(value)

    def set_neighbor_filters(self, fog_id: int, filters: dict[str, PropertyBloomFilter]) -> None:
        self.neighbor[fog_id] = filters

    def set_buddy_filters(self, fog_id: int, filters: dict[str, PropertyBloomFilter]) -> None:
        self.buddy[fog_id] = filters

    def local_snapshot(self) -> dict[str, PropertyBloomFilter]:
        return {name: f.copy() for name, f in self.local.items()}

    def merged_pool_filters(self) -> dict[str, PropertyBloomFilter]:
        """Recursive filters covering this fog and every neighbor tier entry."""
        merged: dict[str, PropertyBloomFilter] = {
            name: f.copy() for name, f in self.local.items()
        }
        for filters in self.neighbor.values():
            for name, f in filters.items():
                if name in merged:
                    merged[name] = merge_filters(merged[name], [f])
                else:
                    merged[name] = f.copy()
        return merged

    @staticmethod
    def _passes(filters: dict[str, PropertyBloomFilter], query: list[tuple[str, Value]]) -> bool:
        # A missing per-property filter means nothing was ever inserted for
        # that property, so the conjunctive query cannot match there.
        for name, value in query:
            f = filters.get(name)
            if f is None or not f.may_contain(value):
                return False
        return True

    def plan_search(self, query: list[tuple[str, Value]]) -> SearchPlan:
        """Which tiers may hold a match for a conjunctive property query.

        A fog that actually indexed a matching entry is always present in the
        corresponding candidate set; empty queries match nowhere.
        """
        if not query:
            return SearchPlan(False, set(), set())
        local_hit = self._passes(self.local, query)
        neighbors = {fid for fid, fl in self.neighbor.items() if self._passes(fl, query)}
        buddies = {fid for fid, fl in self.buddy.items() if self._passes(fl, query)}
        return SearchPlan(local_hit, neighbors, buddies)


@dataclass
class PartitionIndex:
    """Exact inverted index over one fog partition.

    ``entries`` maps property name -> canonical value -> {(edge_id, block_id)};
    ``stream_entries`` is the analogous map onto stream ids for streams owned
    by this fog.
    """

    entries: dict[str, dict[str, set[tuple[str, str]]]] = field(default_factory=dict)
    stream_entries: dict[str, dict[str, set[str]]] = field(default_factory=dict)

    def index_block(
        self,
        edge_id: str,
        block_key: tuple[str, str],
        props: list[tuple[str, Value]],
    ) -> None:
        """Register (edge, block) under every property pair; idempotent."""
        ref = _block_ref(block_key)
        for name, value in props:
            by_value = self.entries.setdefault(name, {})
            by_value.setdefault(canonical_value(value), set()).add((edge_id, ref))

    def lookup(self, query: list[tuple[str, Value]]) -> set[tuple[str, str]]:
        """Exact conjunctive lookup; empty query matches nothing."""
        result: set[tuple[str, str]] | None = None
        for name, value in query:
            hits = self.entries.get(name, {}).get(canonical_value(value), set())
            result = set(hits) if result is None else result & hits
            if not result:
                return set()
        return result or set()

    def index_stream(self, stream_id: str, props: list[tuple[str, Value]]) -> None:
        for name, value in props:
            by_value = self.stream_entries.setdefault(name, {})
            by_value.setdefault(canonical_value(value), set()).add(stream_id)

    def lookup_streams(self, query: list[tuple[str, Value]]) -> set[str]:
        result: set[str] | None = None
        for name, value in query:
            hits = self.stream_entries.get(name, {}).get(canonical_value(value), set())
            result = set(hits) if result is None else result & hits
            if not result:
                return set()
        return result or set()

    def remove_edge(self, edge_id: str) -> None:
        """Drop every block entry hosted by a failed edge."""
        for by_value in self.entries.values():
            for refs in by_value.values():
                stale = {pair for pair in refs if pair[0] == edge_id}
                refs -= stale

    def block_pairs(self) -> set[tuple[str, str]]:
        """All (edge_id, block_ref) pairs currently indexed."""
        pairs: set[tuple[str, str]] = set()
        for by_value in self.entries.values():
            for refs in by_value.values():
                pairs |= refs
        return pairs


def _block_ref(block_key: tuple[str, str]) -> str:
    """Stable string reference for a (stream_id, block_id) pair."""
    return f"{block_key[0]}/{block_key[1]}"


def split_block_ref(ref: str) -> tuple[str, str]:
    sid, _, bid = ref.partition("/")
    return sid, bid


def index_block(
    idx: PartitionIndex,
    filters: FilterSet,
    edge_id: str,
    block_key: tuple[str, str],
    props: list[tuple[str, Value]],
) -> None:
    """Index a hosted block and push its values into the local filters."""
    idx.index_block(edge_id, block_key, props)
    for name, value in props:
        filters.insert_local(name, value)
