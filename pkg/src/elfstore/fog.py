"""Fog service: metadata owner, partition indexer, and placement coordinator.

A fog owns the streams created through it (metadata, versions, leases, the
block registry), indexes the blocks hosted by its edges, ingests edge
heartbeats, disseminates summaries and Bloom filters through the overlay,
coordinates replica placement for puts, answers 0/1/2-hop finds, and
re-replicates blocks when an edge dies.

The node is transport-agnostic: all remote interaction goes through a
``Fabric`` that either dispatches in-process (deterministic simulation) or
speaks the length-prefixed wire protocol over TCP. Mutations of a single
stream are serialized on the stream's lock; registry, index, and filter
mutations are serialized on the node lock, so the same code is safe under
the socket transport's thread-per-connection model.
"""

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

from .bloom import (
    FilterSet,
    PROP_BLOCK_ID,
    PROP_STREAM_ID,
    PartitionIndex,
    Value,
    index_block,
    split_block_ref,
)
from .errors import (
    AlreadyExistsError,
    ElfStoreError,
    IntegrityError,
    InsufficientCapacityError,
    InvalidArgumentError,
    LeaseInvalidError,
    LeaseLostError,
    LeaseUnavailableError,
    NoCapacityError,
    NotFoundError,
    PartialUpdateError,
    PutFailedError,
    StaleVersionError,
    UnavailableError,
)
from .overlay import OverlayTopology
from .placement import (
    ReplicaRequirement,
    choose_edge_in_fog,
    choose_recovery_fog,
    choose_replica_fogs,
    contribution_of,
)
from .stats import (
    DEFAULT_BUCKET_COUNT,
    EdgeStat,
    GlobalMatrix,
    PartitionSummary,
    Quadrant,
    build_global_matrix,
    summarize_partition,
)
from .wire import decode_filters, encode_filters

log = logging.getLogger(__name__)


class Fabric:
    """Transport seam between nodes; see the harness and socket variants."""

    def now(self) -> float:
        raise NotImplementedError

    def call_fog(self, dst: int, op: str, args: dict, payload: bytes | None = None):
        raise NotImplementedError

    def call_edge(self, dst: str, op: str, args: dict, payload: bytes | None = None):
        raise NotImplementedError

    #: Real transports recover concurrently; the simulation stays sequential.
    supports_threads = False


@dataclass
class FogConfig:
    heartbeat_interval: float = 30.0
    miss_threshold: int = 3
    default_lease_duration: float = 100.0
    min_replicas: int = 2
    max_replicas: int = 5
    bucket_count: int = DEFAULT_BUCKET_COUNT
    max_block_size: int = 64 * 1024 * 1024
    cache_capacity: int = 10_000
    recovery_workers: int = 10


@dataclass
class StreamRecord:
    stream_id: str
    owner_fog: int
    reliability: float
    static_props: dict[str, Value]
    dynamic_props: dict[str, Value]
    version: int = 1
    block_registry: list[tuple[str, str]] = field(default_factory=list)
    block_locations: dict[str, set[int]] = field(default_factory=dict)
    block_sizes: dict[str, int] = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def block_count(self) -> int:
        return len(self.block_registry)

    def registry_md5(self, block_id: str) -> str | None:
        for bid, md5 in self.block_registry:
            if bid == block_id:
                return md5
        return None


@dataclass
class BlockRecord:
    block_id: str
    stream_id: str
    static_props: list[tuple[str, Value]]
    replica_fogs: set[int]
    size: int
    md5_checksum: str


@dataclass
class Lease:
    stream_id: str
    client_id: str
    session_key: str
    duration: float
    expiry: float
    renew_count: int = 0


@dataclass
class EdgeEntry:
    stat: EdgeStat
    last_heartbeat: float
    hosted_blocks: set[tuple[str, str]] = field(default_factory=set)
    alive: bool = True


@dataclass
class MetadataCacheEntry:
    stream_id: str
    owner_fog: int
    reliability: float
    props: dict[str, Value]
    version: int
    fetched_at: float


class FogNode:
    def __init__(
        self,
        fog_id: int,
        topology: OverlayTopology,
        fabric: Fabric,
        config: FogConfig | None = None,
        rng_seed: int = 0,
    ):
        self.fog_id = fog_id
        self.topology = topology
        self.fabric = fabric
        self.config = config or FogConfig()
        self._lock = threading.RLock()
        self._seed_counter = rng_seed

        self.streams: dict[str, StreamRecord] = {}
        self.blocks: dict[tuple[str, str], BlockRecord] = {}
        self.edges: dict[str, EdgeEntry] = {}
        self.leases: dict[str, Lease] = {}
        self.index = PartitionIndex()
        self.block_filters = FilterSet()
        self.stream_filters = FilterSet()
        self.summaries: dict[int, PartitionSummary] = {}
        self.meta_cache: OrderedDict[str, MetadataCacheEntry] = OrderedDict()
        self.put_audit_log: list[dict] = []
        self.data_loss_events: list[dict] = []
        self.recovery_reports: list[dict] = []

        self._summary_dirty = True
        self._matrix: GlobalMatrix | None = None
        self._matrix_dirty = True

    # Identity helpers ------------------------------------------------------

    def _next_seed(self) -> int:
        self._seed_counter += 1
        return (self.fog_id << 24) ^ self._seed_counter

    def _nonce(self) -> str:
        # Deterministic per node and call order, unique across the cluster.
        material = f"{self.fog_id}:{self._next_seed()}"
        return hashlib.sha1(material.encode()).hexdigest()[:16]

    def now(self) -> float:
        return self.fabric.now()

    def _call(self, dst: int, op: str, args: dict, payload: bytes | None = None):
        """Fabric call that short-circuits when the destination is this node."""
        if dst == self.fog_id:
            return self.handle(op, args, payload)
        return self.fabric.call_fog(dst, op, args, payload)

    # Statistics plane ------------------------------------------------------

    def live_edge_stats(self) -> list[EdgeStat]:
        return [e.stat for _, e in sorted(self.edges.items()) if e.alive]

    def refresh_local_summary(self) -> None:
        with self._lock:
            if not self._summary_dirty:
                return
            stats = self.live_edge_stats()
            if stats:
                self.summaries[self.fog_id] = summarize_partition(self.fog_id, stats)
            else:
                self.summaries.pop(self.fog_id, None)
            self._summary_dirty = False
            self._matrix_dirty = True

    def global_matrix(self) -> GlobalMatrix:
        self.refresh_local_summary()
        with self._lock:
            if self._matrix_dirty or self._matrix is None:
                summaries = sorted(self.summaries.values(), key=lambda s: s.fog_id)
                if not summaries:
                    raise UnavailableError("no partition summaries available yet")
                self._matrix = build_global_matrix(summaries, self.config.bucket_count)
                self._matrix_dirty = False
            return self._matrix

    def summaries_snapshot(self) -> dict[int, PartitionSummary]:
        self.refresh_local_summary()
        with self._lock:
            return dict(self.summaries)

    def _ingest_summaries(self, summaries: list[dict]) -> None:
        with self._lock:
            for raw in summaries:
                s = PartitionSummary.from_wire(raw)
                if s.fog_id == self.fog_id:
                    continue  # own summary is authoritative locally
                self.summaries[s.fog_id] = s
            self._matrix_dirty = True

    # Heartbeats and failure detection --------------------------------------

    def on_edge_heartbeat(self, report: dict) -> dict:
        """Ingest an edge heartbeat; auto-registers unknown or revived edges."""
        edge_id = report["edge_id"]
        stat = EdgeStat(edge_id, report["reliability"], report["free_storage"])
        with self._lock:
            entry = self.edges.get(edge_id)
            needs_full = False
            if entry is None:
                entry = self.edges[edge_id] = EdgeEntry(stat, self.now())
                needs_full = not report.get("full_report", False)
            elif not entry.alive:
                # Stateless rejoin: storage returns; ask for its inventory.
                entry.alive = True
                needs_full = not report.get("full_report", False)
            entry.stat = stat
            entry.last_heartbeat = self.now()
            self._summary_dirty = True
        for block in report.get("blocks", []):
            self._index_reported_block(edge_id, block)
        return {"ack": True, "needs_full_report": needs_full}

    def _index_reported_block(self, edge_id: str, block: dict) -> None:
        sid, bid = block["stream_id"], block["block_id"]
        props = [tuple(p) for p in block["props"]]
        # A replica that went stale while the edge was dark (the block was
        # updated meanwhile) must not be re-indexed; tell the edge to drop it.
        try:
            owner = self._owner_of(sid)
            registry_md5 = self._locate_block(owner, sid, bid)["md5"]
        except NotFoundError:
            registry_md5 = None
        if registry_md5 is not None and registry_md5 != block["md5"]:
            try:
                self.fabric.call_edge(edge_id, "drop_block", {"stream_id": sid, "block_id": bid})
            except ElfStoreError:
                pass
            return
        with self._lock:
            entry = self.edges[edge_id]
            if (sid, bid) in entry.hosted_blocks:
                return
            entry.hosted_blocks.add((sid, bid))
            index_block(self.index, self.block_filters, edge_id, (sid, bid), props)
            rec = self.blocks.get((sid, bid))
            if rec is None:
                self.blocks[(sid, bid)] = BlockRecord(
                    bid, sid, props, {self.fog_id}, block["size"], block["md5"]
                )
            else:
                rec.replica_fogs.add(self.fog_id)
        if registry_md5 is not None:
            try:
                self._call(
                    self._owner_of(sid),
                    "owner_add_block_location",
                    {"stream_id": sid, "block_id": bid, "fog_id": self.fog_id},
                )
            except ElfStoreError:
                pass

    def detect_failures(self, now: float | None = None) -> list[str]:
        """Mark edges failed after miss_threshold silent intervals; recover."""
        now = self.now() if now is None else now
        window = self.config.miss_threshold * self.config.heartbeat_interval
        failed = []
        with self._lock:
            for edge_id, entry in sorted(self.edges.items()):
                if entry.alive and now - entry.last_heartbeat >= window:
                    failed.append(edge_id)
        for edge_id in failed:
            self._handle_edge_failure(edge_id)
        return failed

    def _handle_edge_failure(self, edge_id: str) -> None:
        with self._lock:
            entry = self.edges[edge_id]
            entry.alive = False
            lost = sorted(entry.hosted_blocks)
            entry.hosted_blocks = set()
            self.index.remove_edge(edge_id)
            for key in lost:
                if not any(
                    key in other.hosted_blocks
                    for other in self.edges.values()
                    if other.alive
                ):
                    self.blocks.pop(key, None)
            self._summary_dirty = True
        log.info("fog %s: edge %s failed, %d blocks to recover", self.fog_id, edge_id, len(lost))
        self.recover_lost_blocks(edge_id, entry.stat.reliability, lost)

    def recover_lost_blocks(
        self, failed_edge: str, failed_reliability: float, lost: list[tuple[str, str]]
    ) -> dict:
        """Re-replicate every block the failed edge held."""
        outcomes = []
        if self.fabric.supports_threads and len(lost) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=self.config.recovery_workers) as pool:
                outcomes = list(
                    pool.map(lambda key: self._recover_block(key, failed_reliability), lost)
                )
        else:
            outcomes = [self._recover_block(key, failed_reliability) for key in lost]
        report = {
            "failed_edge": failed_edge,
            "blocks_lost": len(lost),
            "blocks_recovered": sum(1 for o in outcomes if o["recovered"]),
            "outcomes": outcomes,
        }
        self.recovery_reports.append(report)
        return report

    def _recover_block(self, key: tuple[str, str], failed_reliability: float) -> dict:
        sid, bid = key
        outcome = {"stream_id": sid, "block_id": bid, "recovered": False}
        try:
            owner = self._owner_of(sid)
            loc = self._locate_block(owner, sid, bid)
            survivors = set(loc["fogs"])
            if (sid, bid) not in self.blocks:
                survivors.discard(self.fog_id)
            if not survivors:
                self.data_loss_events.append({"stream_id": sid, "block_id": bid})
                log.error("fog %s: block %s/%s lost with no surviving replica", self.fog_id, sid, bid)
                return outcome
            payload, props = self._fetch_block_payload(sid, bid, survivors, loc["md5"])
            target_fog, hint = choose_recovery_fog(
                self.global_matrix(),
                self.summaries_snapshot(),
                failed_reliability,
                len(payload),
                exclude=survivors,
            )
            result, _ = self._call(
                target_fog,
                "store_replica",
                {
                    "stream_id": sid,
                    "block_id": bid,
                    "props": [list(p) for p in props],
                    "md5": loc["md5"],
                    "hint": hint.value,
                },
                payload,
            )
            new_set = sorted(survivors | {target_fog})
            self._call(
                owner,
                "owner_set_block_locations",
                {"stream_id": sid, "block_id": bid, "fogs": new_set},
            )
            for fog in new_set:
                self._call(
                    fog,
                    "set_replica_fogs",
                    {"stream_id": sid, "block_id": bid, "fogs": new_set},
                )
            outcome.update(
                recovered=True, target_fog=target_fog, target_edge=result["edge_id"]
            )
        except (InsufficientCapacityError, NoCapacityError) as exc:
            log.error("fog %s: recovery stalled for %s/%s: %s", self.fog_id, sid, bid, exc)
            outcome["error"] = exc.code
        except ElfStoreError as exc:
            log.error("fog %s: recovery failed for %s/%s: %s", self.fog_id, sid, bid, exc)
            outcome["error"] = exc.code
        return outcome

    def _fetch_block_payload(
        self, sid: str, bid: str, survivors: set[int], expected_md5: str
    ) -> tuple[bytes, list[tuple[str, Value]]]:
        if (sid, bid) in self.blocks:
            result, payload = self.serve_block(sid, bid)
            return payload, [tuple(p) for p in result["props"]]
        for fog in sorted(survivors):
            try:
                result, payload = self._call(
                    fog, "serve_block", {"stream_id": sid, "block_id": bid}
                )
            except ElfStoreError:
                continue
            if hashlib.md5(payload).hexdigest() == expected_md5:
                return payload, [tuple(p) for p in result["props"]]
        raise UnavailableError(f"no surviving replica of {sid}/{bid} readable")

    # Dissemination ---------------------------------------------------------

    def local_bundle(self) -> dict:
        self.refresh_local_summary()
        with self._lock:
            summary = self.summaries.get(self.fog_id)
            return {
                "fog_id": self.fog_id,
                "summary": summary.to_wire() if summary else None,
                "block_filters": encode_filters(self.block_filters.local),
                "stream_filters": encode_filters(self.stream_filters.local),
            }

    def receive_pool_update(self, bundle: dict) -> dict:
        """Buddy-side ingestion of a pool member's heartbeat bundle."""
        member = bundle["fog_id"]
        with self._lock:
            if bundle.get("summary"):
                self._ingest_summaries([bundle["summary"]])
            else:
                self.summaries.pop(member, None)
                self._matrix_dirty = True
            self.block_filters.set_neighbor_filters(member, decode_filters(bundle["block_filters"]))
            self.stream_filters.set_neighbor_filters(member, decode_filters(bundle["stream_filters"]))
        return {"ack": True}

    def buddy_bundle(self) -> dict:
        """Own pool digest a buddy exchanges with the other buddies."""
        self.refresh_local_summary()
        pool = self.topology.pool_members(self.fog_id)
        with self._lock:
            summaries = [
                self.summaries[f].to_wire() for f in pool if f in self.summaries
            ]
            return {
                "pool_buddy_id": self.fog_id,
                "summaries": summaries,
                "block_filters": encode_filters(self.block_filters.merged_pool_filters()),
                "stream_filters": encode_filters(self.stream_filters.merged_pool_filters()),
            }

    def receive_buddy_update(self, bundle: dict) -> dict:
        peer = bundle["pool_buddy_id"]
        with self._lock:
            self._ingest_summaries(bundle["summaries"])
            self.block_filters.set_buddy_filters(peer, decode_filters(bundle["block_filters"]))
            self.stream_filters.set_buddy_filters(peer, decode_filters(bundle["stream_filters"]))
        return {"ack": True}

    def pool_broadcast_bundle(self, sibling_bundles: dict[int, dict], buddy_bundles: dict[int, dict]) -> dict:
        """Everything a pool member needs for planning and 2-hop search."""
        self.refresh_local_summary()
        with self._lock:
            return {
                "from_buddy": self.fog_id,
                "summaries": [s.to_wire() for _, s in sorted(self.summaries.items())],
                "sibling_locals": {str(f): b for f, b in sorted(sibling_bundles.items())},
                "buddy_filters": {str(f): b for f, b in sorted(buddy_bundles.items())},
            }

    def receive_pool_broadcast(self, bundle: dict) -> dict:
        with self._lock:
            known = {s["fog_id"] for s in bundle["summaries"]}
            for fid in list(self.summaries):
                if fid != self.fog_id and fid not in known:
                    del self.summaries[fid]
            self._ingest_summaries(bundle["summaries"])
            for fid_str, sib in bundle["sibling_locals"].items():
                fid = int(fid_str)
                if fid == self.fog_id:
                    continue
                self.block_filters.set_neighbor_filters(fid, decode_filters(sib["block_filters"]))
                self.stream_filters.set_neighbor_filters(fid, decode_filters(sib["stream_filters"]))
            for fid_str, bb in bundle["buddy_filters"].items():
                fid = int(fid_str)
                self.block_filters.set_buddy_filters(fid, decode_filters(bb["block_filters"]))
                self.stream_filters.set_buddy_filters(fid, decode_filters(bb["stream_filters"]))
        return {"ack": True}

    # Stream lifecycle ------------------------------------------------------

    def create_stream(
        self, sid: str, smeta: list[tuple[str, Value, str]], reliability: float
    ) -> dict:
        if not 0.0 < reliability < 1.0:
            raise InvalidArgumentError("stream reliability must be in (0, 1)")
        if sid in self.streams:
            raise AlreadyExistsError(f"stream {sid} already exists")
        owners, _ = self._find_stream_internal([(PROP_STREAM_ID, sid)])
        if owners:
            raise AlreadyExistsError(f"stream {sid} already registered elsewhere")
        static = {name: value for name, value, kind in smeta if kind == "static"}
        dynamic = {name: value for name, value, kind in smeta if kind == "dynamic"}
        record = StreamRecord(sid, self.fog_id, reliability, static, dynamic)
        with self._lock:
            self.streams[sid] = record
            pairs = [(PROP_STREAM_ID, sid)] + sorted(static.items())
            self.index.index_stream(sid, pairs)
            for name, value in pairs:
                self.stream_filters.insert_local(name, value)
        return {"owner_fog": self.fog_id, "version": record.version}

    def _stream_or_error(self, sid: str) -> StreamRecord:
        rec = self.streams.get(sid)
        if rec is None:
            raise NotFoundError(f"fog {self.fog_id} does not own stream {sid}")
        return rec

    def _owner_of(self, sid: str) -> int:
        if sid in self.streams:
            return self.fog_id
        cached = self.meta_cache.get(sid)
        if cached is not None:
            return cached.owner_fog
        owners, _ = self._find_stream_internal([(PROP_STREAM_ID, sid)])
        if sid not in owners:
            raise NotFoundError(f"stream {sid} not found anywhere reachable")
        return owners[sid]

    def _stream_brief(self, sid: str) -> MetadataCacheEntry:
        """Owner + reliability for a stream, through the metadata cache."""
        if sid in self.streams:
            rec = self.streams[sid]
            return MetadataCacheEntry(
                sid, self.fog_id, rec.reliability, dict(rec.dynamic_props), rec.version, self.now()
            )
        cached = self.meta_cache.get(sid)
        if cached is not None:
            self.meta_cache.move_to_end(sid)
            return cached
        return self._fetch_and_cache_meta(sid, self._owner_of(sid))

    def _fetch_and_cache_meta(self, sid: str, owner: int) -> MetadataCacheEntry:
        result, _ = self._call(owner, "owner_get_meta", {"stream_id": sid})
        entry = MetadataCacheEntry(
            sid, owner, result["reliability"], result["props"], result["version"], self.now()
        )
        with self._lock:
            self.meta_cache[sid] = entry
            self.meta_cache.move_to_end(sid)
            while len(self.meta_cache) > self.config.cache_capacity:
                self.meta_cache.popitem(last=False)
        return entry

    # Leasing ---------------------------------------------------------------

    def open_stream(self, sid: str, client_id: str, requested_duration: float | None = None) -> dict:
        owner = self._owner_of(sid)
        if owner == self.fog_id:
            return self.owner_open_stream(sid, client_id, requested_duration)
        result, _ = self._call(
            owner,
            "owner_open_stream",
            {"stream_id": sid, "client_id": client_id, "requested_duration": requested_duration},
        )
        return result

    def owner_open_stream(
        self, sid: str, client_id: str, requested_duration: float | None = None
    ) -> dict:
        rec = self._stream_or_error(sid)
        duration = requested_duration or self.config.default_lease_duration
        now = self.now()
        with rec.lock:
            lease = self.leases.get(sid)
            if lease is not None and lease.expiry > now and lease.client_id != client_id:
                raise LeaseUnavailableError(
                    f"stream {sid} leased by {lease.client_id} until {lease.expiry}"
                )
            if lease is not None and lease.expiry > now and lease.client_id == client_id:
                lease.expiry = now + duration
                lease.renew_count += 1
            else:
                lease = Lease(sid, client_id, self._nonce(), duration, now + duration)
                self.leases[sid] = lease
            return {
                "duration": duration,
                "session_key": lease.session_key,
                "expiry": lease.expiry,
            }

    def renew_lease(self, sid: str, client_id: str, session_key: str) -> dict:
        owner = self._owner_of(sid)
        if owner == self.fog_id:
            return self.owner_renew_lease(sid, client_id, session_key)
        result, _ = self._call(
            owner,
            "owner_renew_lease",
            {"stream_id": sid, "client_id": client_id, "session_key": session_key},
        )
        return result

    def owner_renew_lease(self, sid: str, client_id: str, session_key: str) -> dict:
        rec = self._stream_or_error(sid)
        now = self.now()
        with rec.lock:
            lease = self.leases.get(sid)
            if lease is None or lease.client_id != client_id or lease.session_key != session_key:
                # Another client acquired the lease since (or none was held).
                raise LeaseLostError(f"lease on {sid} no longer held by {client_id}")
            # An expired lease is extended only when nobody acquired it since,
            # which is exactly the case where our record still names the client.
            lease.expiry = now + lease.duration
            lease.renew_count += 1
            return {"duration": lease.duration, "expiry": lease.expiry}

    def owner_check_lease(self, sid: str, client_id: str, session_key: str) -> dict:
        rec = self._stream_or_error(sid)
        with rec.lock:
            lease = self.leases.get(sid)
            if (
                lease is None
                or lease.client_id != client_id
                or lease.session_key != session_key
                or lease.expiry <= self.now()
            ):
                raise LeaseInvalidError(f"no valid lease on {sid} for {client_id}")
            return {"valid": True, "expiry": lease.expiry}

    def _validate_lease(self, sid: str, lease: dict) -> None:
        owner = self._owner_of(sid)
        args = {
            "stream_id": sid,
            "client_id": lease["client_id"],
            "session_key": lease["session_key"],
        }
        if owner == self.fog_id:
            self.owner_check_lease(sid, lease["client_id"], lease["session_key"])
        else:
            self._call(owner, "owner_check_lease", args)

    # Put / update ----------------------------------------------------------

    def put_block(
        self,
        sid: str,
        bid: str,
        props: list[tuple[str, Value]],
        payload: bytes,
        lease: dict | None = None,
        client_id: str | None = None,
        client_is_edge: bool = False,
        min_replicas: int | None = None,
        max_replicas: int | None = None,
    ) -> dict:
        if len(payload) > self.config.max_block_size:
            raise InvalidArgumentError(
                f"block of {len(payload)} bytes exceeds cap {self.config.max_block_size}"
            )
        brief = self._stream_brief(sid)
        if lease is not None:
            self._validate_lease(sid, lease)
        owner = brief.owner_fog
        if self._locate_block_or_none(owner, sid, bid) is not None:
            raise AlreadyExistsError(f"block {bid} already in stream {sid}")

        md5 = hashlib.md5(payload).hexdigest()
        req = ReplicaRequirement(
            block_size=len(payload),
            target_reliability=brief.reliability,
            min_replicas=min_replicas or self.config.min_replicas,
            max_replicas=max_replicas or self.config.max_replicas,
            client_fog=self.fog_id,
            client_is_edge=client_is_edge,
        )
        summaries = self.summaries_snapshot()
        try:
            plan = choose_replica_fogs(self.global_matrix(), summaries, req, self._next_seed())
        except InsufficientCapacityError as exc:
            raise PutFailedError(f"cannot place {sid}/{bid}: {exc}") from exc
        full_props = self._full_block_props(sid, bid, props)

        stored: list[tuple[int, str]] = []
        warnings = list(plan.warnings)
        lease_info = None
        if lease is not None and client_id is not None:
            lease_info = {"client_id": client_id, "session_key": lease["session_key"]}
        for fog_id, hint in plan.choices:
            try:
                placed = self._place_replica_with_fallback(
                    fog_id, hint, sid, bid, full_props, payload, md5, lease_info,
                    exclude={f for f, _ in stored},
                    summaries=summaries,
                )
            except IntegrityError as exc:
                raise PutFailedError(f"replica of {sid}/{bid} kept failing checksum") from exc
            if placed is None:
                warnings.append(f"replica on fog {fog_id} could not be placed")
                continue
            stored.append(placed)
        if len(stored) < req.min_replicas:
            raise PutFailedError(
                f"stored {len(stored)} replicas of {sid}/{bid}, "
                f"required at least {req.min_replicas}"
            )

        replica_fogs = sorted({f for f, _ in stored})
        self._call(
            owner,
            "owner_register_block",
            {
                "stream_id": sid,
                "block_id": bid,
                "md5": md5,
                "size": len(payload),
                "fogs": replica_fogs,
            },
        )
        for fog in replica_fogs:
            self._call(
                fog,
                "set_replica_fogs",
                {"stream_id": sid, "block_id": bid, "fogs": replica_fogs},
            )
        return {
            "replica_fogs": replica_fogs,
            "replica_edges": sorted(e for _, e in stored),
            "q": len(stored),
            "warnings": warnings,
            "reliability_unmet": plan.reliability_unmet,
        }

    def _full_block_props(
        self, sid: str, bid: str, props: list[tuple[str, Value]]
    ) -> list[tuple[str, Value]]:
        full = [(PROP_BLOCK_ID, bid), (PROP_STREAM_ID, sid)]
        for name, value in props:
            if name not in (PROP_BLOCK_ID, PROP_STREAM_ID):
                full.append((name, value))
        return full

    def _place_replica_with_fallback(
        self,
        fog_id: int,
        hint: Quadrant,
        sid: str,
        bid: str,
        props: list[tuple[str, Value]],
        payload: bytes,
        md5: str,
        lease_info: dict | None,
        exclude: set[int],
        summaries: dict[int, PartitionSummary],
    ) -> tuple[int, str] | None:
        """Store one replica, rerouting to a similar fog if the target is full."""
        args = {
            "stream_id": sid,
            "block_id": bid,
            "props": [list(p) for p in props],
            "md5": md5,
            "hint": hint.value,
        }
        if lease_info:
            args["lease"] = lease_info
        targets = [(fog_id, hint)]
        try:
            wanted = contribution_of(summaries[fog_id], hint)
        except (KeyError, ElfStoreError):
            wanted = None
        tried: set[int] = set(exclude)
        while targets:
            target, target_hint = targets.pop(0)
            tried.add(target)
            args["hint"] = target_hint.value
            try:
                return self._store_with_integrity_retry(target, args, payload)
            except (NoCapacityError, UnavailableError):
                # Stale view of the target: reroute to a fog whose admissible
                # quadrant contributes similar reliability.
                if wanted is None:
                    return None
                try:
                    alt = choose_recovery_fog(
                        self.global_matrix(), summaries, wanted, len(payload), exclude=tried
                    )
                except InsufficientCapacityError:
                    return None
                targets.append(alt)
        return None

    def _store_with_integrity_retry(self, target: int, args: dict, payload: bytes) -> tuple[int, str]:
        try:
            result, _ = self._call(target, "store_replica", args, payload)
        except IntegrityError:
            result, _ = self._call(target, "store_replica", args, payload)
        return target, result["edge_id"]

    def store_replica(self, args: dict, payload: bytes) -> dict:
        """Host-side replica placement onto a local edge."""
        sid, bid = args["stream_id"], args["block_id"]
        hint = Quadrant(args["hint"])
        props = [tuple(p) for p in args["props"]]
        self.refresh_local_summary()
        with self._lock:
            summary = self.summaries.get(self.fog_id)
            stats = self.live_edge_stats()
        if summary is None or not stats:
            raise NoCapacityError(f"fog {self.fog_id} has no live edges")
        edge_id = choose_edge_in_fog(stats, summary, hint, len(payload))
        result, _ = self.fabric.call_edge(
            edge_id,
            "store_block",
            {"stream_id": sid, "block_id": bid, "props": [list(p) for p in props], "md5": args["md5"]},
            payload,
        )
        with self._lock:
            entry = self.edges[edge_id]
            entry.hosted_blocks.add((sid, bid))
            entry.stat = EdgeStat(edge_id, entry.stat.reliability, result["free_storage_after"])
            index_block(self.index, self.block_filters, edge_id, (sid, bid), props)
            rec = self.blocks.get((sid, bid))
            if rec is None:
                self.blocks[(sid, bid)] = BlockRecord(
                    bid, sid, props, {self.fog_id}, len(payload), args["md5"]
                )
            else:
                rec.md5_checksum = args["md5"]
                rec.size = len(payload)
            self._summary_dirty = True
            if args.get("lease"):
                self.put_audit_log.append(
                    {
                        "time": self.now(),
                        "client_id": args["lease"]["client_id"],
                        "session_key": args["lease"]["session_key"],
                        "stream_id": sid,
                        "block_id": bid,
                    }
                )
        return {"edge_id": edge_id, "actual_reliability": self.edges[edge_id].stat.reliability}

    def update_block(
        self,
        sid: str,
        bid: str,
        payload: bytes,
        lease: dict | None = None,
        client_id: str | None = None,
    ) -> dict:
        if lease is not None:
            self._validate_lease(sid, lease)
        owner = self._owner_of(sid)
        loc = self._locate_block_or_none(owner, sid, bid)
        if loc is None:
            raise NotFoundError(f"block {bid} not in stream {sid}")
        md5 = hashlib.md5(payload).hexdigest()
        failed: list[int] = []
        for fog in sorted(loc["fogs"]):
            try:
                self._call(
                    fog,
                    "replace_replica",
                    {"stream_id": sid, "block_id": bid, "md5": md5},
                    payload,
                )
            except ElfStoreError:
                failed.append(fog)
        if failed:
            raise PartialUpdateError(
                f"update of {sid}/{bid} failed on fogs {failed}", failed_fogs=failed
            )
        self._call(
            owner, "owner_update_block_md5", {"stream_id": sid, "block_id": bid, "md5": md5}
        )
        return {"replica_fogs": sorted(loc["fogs"]), "md5": md5}

    def replace_replica(self, args: dict, payload: bytes) -> dict:
        sid, bid = args["stream_id"], args["block_id"]
        rec = self.blocks.get((sid, bid))
        if rec is None:
            raise NotFoundError(f"fog {self.fog_id} hosts no replica of {sid}/{bid}")
        hosting = [
            edge_id
            for edge_id, entry in sorted(self.edges.items())
            if entry.alive and (sid, bid) in entry.hosted_blocks
        ]
        if not hosting:
            raise UnavailableError(f"no live edge hosts {sid}/{bid} on fog {self.fog_id}")
        for edge_id in hosting:
            result, _ = self.fabric.call_edge(
                edge_id,
                "store_block",
                {
                    "stream_id": sid,
                    "block_id": bid,
                    "props": [list(p) for p in rec.static_props],
                    "md5": args["md5"],
                },
                payload,
            )
            with self._lock:
                entry = self.edges[edge_id]
                entry.stat = EdgeStat(edge_id, entry.stat.reliability, result["free_storage_after"])
                self._summary_dirty = True
        with self._lock:
            rec.md5_checksum = args["md5"]
            rec.size = len(payload)
        return {"edges": hosting}

    # Owner-side metadata ops ------------------------------------------------

    def owner_register_block(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        bid = args["block_id"]
        with rec.lock:
            if rec.registry_md5(bid) is not None:
                raise AlreadyExistsError(f"block {bid} already registered")
            rec.block_registry.append((bid, args["md5"]))
            rec.block_locations[bid] = set(args["fogs"])
            rec.block_sizes[bid] = args["size"]
            return {"block_count": rec.block_count}

    def owner_update_block_md5(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        bid = args["block_id"]
        with rec.lock:
            for i, (existing, _) in enumerate(rec.block_registry):
                if existing == bid:
                    rec.block_registry[i] = (bid, args["md5"])
                    return {"ok": True}
        raise NotFoundError(f"block {bid} not registered")

    def owner_set_block_locations(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        with rec.lock:
            rec.block_locations[args["block_id"]] = set(args["fogs"])
        return {"ok": True}

    def owner_add_block_location(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        with rec.lock:
            rec.block_locations.setdefault(args["block_id"], set()).add(args["fog_id"])
        return {"ok": True}

    def _locate_block(self, owner: int, sid: str, bid: str) -> dict:
        if owner == self.fog_id:
            return self.owner_locate_block({"stream_id": sid, "block_id": bid})
        result, _ = self._call(
            owner, "owner_locate_block", {"stream_id": sid, "block_id": bid}
        )
        return result

    def _locate_block_or_none(self, owner: int, sid: str, bid: str) -> dict | None:
        try:
            return self._locate_block(owner, sid, bid)
        except NotFoundError:
            return None

    def owner_locate_block(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        bid = args["block_id"]
        with rec.lock:
            md5 = rec.registry_md5(bid)
            if md5 is None:
                raise NotFoundError(f"block {bid} not in stream {args['stream_id']}")
            return {
                "fogs": sorted(rec.block_locations.get(bid, set())),
                "md5": md5,
                "size": rec.block_sizes.get(bid, 0),
            }

    def set_replica_fogs(self, args: dict) -> dict:
        rec = self.blocks.get((args["stream_id"], args["block_id"]))
        if rec is not None:
            rec.replica_fogs = set(args["fogs"])
        return {"ok": True}

    def owner_get_meta(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        with rec.lock:
            props: dict[str, Value] = dict(rec.static_props)
            props.update(rec.dynamic_props)
            props["blockCount"] = rec.block_count
            props["reliability"] = rec.reliability
            return {
                "stream_id": rec.stream_id,
                "owner_fog": rec.owner_fog,
                "reliability": rec.reliability,
                "props": props,
                "version": rec.version,
            }

    def owner_update_meta(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        props: dict[str, Value] = args["props"]
        version = args["version"]
        reserved = {"blockCount", "reliability", PROP_STREAM_ID, PROP_BLOCK_ID}
        with rec.lock:
            for name in props:
                if name in rec.static_props or name in reserved:
                    raise InvalidArgumentError(f"property {name!r} is not dynamic")
            if rec.version != version:
                raise StaleVersionError(
                    f"stream {rec.stream_id} at version {rec.version}, update used {version}",
                    current_version=rec.version,
                )
            rec.dynamic_props.update(props)
            rec.version += 1
            return {"version": rec.version}

    def owner_stream_registry(self, args: dict) -> dict:
        rec = self._stream_or_error(args["stream_id"])
        with rec.lock:
            return {"registry": [[bid, md5] for bid, md5 in rec.block_registry]}

    # Client metadata ops -----------------------------------------------------

    def get_stream_meta(self, sid: str, latest: bool = False) -> dict:
        if sid in self.streams:
            return self.owner_get_meta({"stream_id": sid})
        if not latest:
            cached = self.meta_cache.get(sid)
            if cached is not None:
                self.meta_cache.move_to_end(sid)
                props = dict(cached.props)
                return {
                    "stream_id": sid,
                    "owner_fog": cached.owner_fog,
                    "reliability": cached.reliability,
                    "props": props,
                    "version": cached.version,
                    "cached": True,
                }
        owner = self._owner_of(sid)
        result, _ = self._call(owner, "owner_get_meta", {"stream_id": sid})
        entry = MetadataCacheEntry(
            sid, owner, result["reliability"], result["props"], result["version"], self.now()
        )
        with self._lock:
            self.meta_cache[sid] = entry
            self.meta_cache.move_to_end(sid)
            while len(self.meta_cache) > self.config.cache_capacity:
                self.meta_cache.popitem(last=False)
        return result

    def update_stream_meta(self, sid: str, props: dict[str, Value], version: int) -> dict:
        owner = self._owner_of(sid)
        args = {"stream_id": sid, "props": props, "version": version}
        if owner == self.fog_id:
            result = self.owner_update_meta(args)
        else:
            result, _ = self._call(owner, "owner_update_meta", args)
        cached = self.meta_cache.get(sid)
        if cached is not None:
            cached.props.update(props)
            cached.version = result["version"]
            cached.fetched_at = self.now()
        return result

    def get_stream_registry(self, sid: str) -> list[tuple[str, str]]:
        owner = self._owner_of(sid)
        if owner == self.fog_id:
            result = self.owner_stream_registry({"stream_id": sid})
        else:
            result, _ = self._call(owner, "owner_stream_registry", {"stream_id": sid})
        return [(bid, md5) for bid, md5 in result["registry"]]

    # Search ------------------------------------------------------------------

    def exact_lookup(self, args: dict) -> dict:
        query = [tuple(p) for p in args["query"]]
        if args["kind"] == "stream":
            return {"streams": sorted(self.index.lookup_streams(query))}
        refs = self.index.lookup(query)
        return {"refs": sorted({ref for _, ref in refs})}

    def find_forward(self, args: dict) -> dict:
        """Buddy-side search: own index plus this pool's passing members."""
        query = [tuple(p) for p in args["query"]]
        kind = args["kind"]
        inner_hops = 0
        if kind == "stream":
            found = {sid: self.fog_id for sid in self.index.lookup_streams(query)}
            plan = self.stream_filters.plan_search(query)
        else:
            found = {ref: [self.fog_id] for _, ref in self.index.lookup(query)}
            plan = self.block_filters.plan_search(query)
        pool = set(self.topology.pool_members(self.fog_id))
        for member in sorted(plan.candidate_neighbors & pool):
            inner_hops = 1
            result, _ = self._call(member, "exact_lookup", args)
            if kind == "stream":
                for sid in result["streams"]:
                    found.setdefault(sid, member)
            else:
                for ref in result["refs"]:
                    found.setdefault(ref, []).append(member)
        if kind == "stream":
            return {"streams": {s: f for s, f in sorted(found.items())}, "inner_hops": inner_hops}
        return {
            "refs": {r: sorted(set(f)) for r, f in sorted(found.items())},
            "inner_hops": inner_hops,
        }

    def _find_block_internal(
        self, query: list[tuple[str, Value]]
    ) -> tuple[dict[str, list[int]], int]:
        """Staged 0/1/2-hop search; returns ({block_ref: hosting fogs}, hops)."""
        local = self.index.lookup(query)
        if local:
            return {ref: [self.fog_id] for _, ref in sorted(local)}, 0
        plan = self.block_filters.plan_search(query)
        found: dict[str, set[int]] = {}
        hops_used = 1 if plan.candidate_neighbors else 0
        for member in sorted(plan.candidate_neighbors):
            result, _ = self._call(
                member, "exact_lookup", {"query": [list(p) for p in query], "kind": "block"}
            )
            for ref in result["refs"]:
                found.setdefault(ref, set()).add(member)
        if found:
            return {r: sorted(f) for r, f in sorted(found.items())}, 1
        for buddy in sorted(plan.candidate_buddies):
            result, _ = self._call(
                buddy, "find_forward", {"query": [list(p) for p in query], "kind": "block"}
            )
            hops_used = max(hops_used, 1 + result["inner_hops"])
            for ref, fogs in result["refs"].items():
                found.setdefault(ref, set()).update(fogs)
        return {r: sorted(f) for r, f in sorted(found.items())}, hops_used

    def find_block(self, query: list[tuple[str, Value]]) -> dict:
        refs, hops = self._find_block_internal([tuple(p) for p in query])
        matches = []
        for ref, fogs in sorted(refs.items()):
            sid, bid = split_block_ref(ref)
            matches.append({"stream_id": sid, "block_id": bid, "fogs": fogs})
        return {"matches": matches, "hops": hops}

    def _find_stream_internal(
        self, query: list[tuple[str, Value]]
    ) -> tuple[dict[str, int], int]:
        local = self.index.lookup_streams(query)
        if local:
            return {sid: self.fog_id for sid in sorted(local)}, 0
        plan = self.stream_filters.plan_search(query)
        found: dict[str, int] = {}
        for member in sorted(plan.candidate_neighbors):
            result, _ = self._call(
                member, "exact_lookup", {"query": [list(p) for p in query], "kind": "stream"}
            )
            for sid in result["streams"]:
                found.setdefault(sid, member)
        if found:
            return found, 1
        hops = 0
        for buddy in sorted(plan.candidate_buddies):
            result, _ = self._call(
                buddy, "find_forward", {"query": [list(p) for p in query], "kind": "stream"}
            )
            hops = max(hops, 1 + result["inner_hops"])
            for sid, fog in result["streams"].items():
                found.setdefault(sid, fog)
        return found, hops

    def find_stream(self, query: list[tuple[str, Value]]) -> dict:
        owners, hops = self._find_stream_internal([tuple(p) for p in query])
        return {"stream_ids": sorted(owners), "owners": owners, "hops": hops}

    # Get ---------------------------------------------------------------------

    def serve_block(self, sid: str, bid: str) -> tuple[dict, bytes]:
        """Read a block from one of this partition's live edges."""
        rec = self.blocks.get((sid, bid))
        if rec is None:
            raise NotFoundError(f"fog {self.fog_id} hosts no replica of {sid}/{bid}")
        hosting = [
            edge_id
            for edge_id, entry in sorted(self.edges.items())
            if entry.alive and (sid, bid) in entry.hosted_blocks
        ]
        last_error: ElfStoreError | None = None
        for edge_id in hosting:
            try:
                result, payload = self.fabric.call_edge(
                    edge_id, "read_block", {"stream_id": sid, "block_id": bid}
                )
            except ElfStoreError as exc:
                last_error = exc
                continue
            if hashlib.md5(payload).hexdigest() != rec.md5_checksum:
                last_error = IntegrityError(f"edge {edge_id} served a stale or corrupt replica")
                continue
            return (
                {"props": [list(p) for p in rec.static_props], "md5": rec.md5_checksum},
                payload,
            )
        raise last_error or UnavailableError(f"no live replica of {sid}/{bid} on fog {self.fog_id}")

    def get_block(self, sid: str, bid: str) -> dict:
        """Serve locally when possible, else fetch from a candidate fog."""
        if (sid, bid) in self.blocks:
            try:
                result, payload = self.serve_block(sid, bid)
                return {
                    "payload": payload,
                    "props": result["props"],
                    "md5": result["md5"],
                    "served_by": self.fog_id,
                    "local": True,
                    "remote_fetches": 0,
                }
            except ElfStoreError:
                pass  # local copies unreadable; fall through to remote search
        refs, _hops = self._find_block_internal(
            [(PROP_STREAM_ID, sid), (PROP_BLOCK_ID, bid)]
        )
        candidates = refs.get(f"{sid}/{bid}", [])
        fetches = 0
        last_error: ElfStoreError | None = None
        for fog in candidates:
            if fog == self.fog_id:
                continue
            fetches += 1
            try:
                result, payload = self._call(
                    fog, "serve_block", {"stream_id": sid, "block_id": bid}
                )
            except ElfStoreError as exc:
                last_error = exc
                continue
            return {
                "payload": payload,
                "props": result["props"],
                "md5": result["md5"],
                "served_by": fog,
                "local": False,
                "remote_fetches": fetches,
            }
        if last_error is not None:
            raise UnavailableError(f"all replicas of {sid}/{bid} unreachable")
        raise NotFoundError(f"block {sid}/{bid} not found")

    # Wire dispatch -------------------------------------------------------------

    def handle(self, op: str, args: dict, payload: bytes | None):
        """Adapt wire ops onto methods; returns (result, payload | None)."""
        if op == "heartbeat":
            return self.on_edge_heartbeat(args), None
        if op == "pool_update":
            return self.receive_pool_update(args), None
        if op == "buddy_update":
            return self.receive_buddy_update(args), None
        if op == "pool_broadcast":
            return self.receive_pool_broadcast(args), None
        if op == "create_stream":
            return (
                self.create_stream(
                    args["stream_id"],
                    [tuple(p) for p in args["smeta"]],
                    args["reliability"],
                ),
                None,
            )
        if op == "open_stream":
            return (
                self.open_stream(
                    args["stream_id"], args["client_id"], args.get("requested_duration")
                ),
                None,
            )
        if op == "renew_lease":
            return (
                self.renew_lease(args["stream_id"], args["client_id"], args["session_key"]),
                None,
            )
        if op == "put_block":
            return (
                self.put_block(
                    args["stream_id"],
                    args["block_id"],
                    [tuple(p) for p in args.get("props", [])],
                    payload or b"",
                    lease=args.get("lease"),
                    client_id=args.get("client_id"),
                    client_is_edge=args.get("client_is_edge", False),
                    min_replicas=args.get("min_replicas"),
                    max_replicas=args.get("max_replicas"),
                ),
                None,
            )
        if op == "update_block":
            return (
                self.update_block(
                    args["stream_id"],
                    args["block_id"],
                    payload or b"",
                    lease=args.get("lease"),
                    client_id=args.get("client_id"),
                ),
                None,
            )
        if op == "find_block":
            return self.find_block([tuple(p) for p in args["query"]]), None
        if op == "find_stream":
            return self.find_stream([tuple(p) for p in args["query"]]), None
        if op == "get_block":
            result = self.get_block(args["stream_id"], args["block_id"])
            payload_out = result.pop("payload")
            return result, payload_out
        if op == "get_stream_meta":
            return self.get_stream_meta(args["stream_id"], args.get("latest", False)), None
        if op == "update_stream_meta":
            return (
                self.update_stream_meta(args["stream_id"], args["props"], args["version"]),
                None,
            )
        if op == "get_stream_registry":
            return {"registry": self.get_stream_registry(args["stream_id"])}, None
        if op == "exact_lookup":
            return self.exact_lookup(args), None
        if op == "find_forward":
            return self.find_forward(args), None
        if op == "store_replica":
            if payload is None:
                raise IntegrityError("store_replica requires a payload frame")
            return self.store_replica(args, payload), None
        if op == "replace_replica":
            if payload is None:
                raise IntegrityError("replace_replica requires a payload frame")
            return self.replace_replica(args, payload), None
        if op == "serve_block":
            return self.serve_block(args["stream_id"], args["block_id"])
        if op == "set_replica_fogs":
            return self.set_replica_fogs(args), None
        if op == "owner_register_block":
            return self.owner_register_block(args), None
        if op == "owner_update_block_md5":
            return self.owner_update_block_md5(args), None
        if op == "owner_set_block_locations":
            return self.owner_set_block_locations(args), None
        if op == "owner_add_block_location":
            return self.owner_add_block_location(args), None
        if op == "owner_locate_block":
            return self.owner_locate_block(args), None
        if op == "owner_get_meta":
            return self.owner_get_meta(args), None
        if op == "owner_update_meta":
            return self.owner_update_meta(args), None
        if op == "owner_stream_registry":
            return self.owner_stream_registry(args), None
        if op == "owner_open_stream":
            return (
                self.owner_open_stream(
                    args["stream_id"], args["client_id"], args.get("requested_duration")
                ),
                None,
            )
        if op == "owner_renew_lease":
            return (
                self.owner_renew_lease(args["stream_id"], args["client_id"], args["session_key"]),
                None,
            )
        if op == "owner_check_lease":
            return (
                self.owner_check_lease(args["stream_id"], args["client_id"], args["session_key"]),
                None,
            )
        raise NotFoundError(f"fog op {op!r} not supported")
