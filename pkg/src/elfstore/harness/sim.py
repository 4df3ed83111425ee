"""In-process simulated cluster with a virtual clock.

Everything is deterministic under a fixed spec seed: reliabilities are
sampled from seeded generators, all node iteration is in sorted id order,
and each simulated round runs fixed phases -- edge heartbeats, the three
dissemination passes (pool members to buddy, buddy to buddy, buddy back to
pool), failure detection, then one client step. The fabric counts every
message and payload byte, and models per-op latency as
``hops * hop_latency + bytes / bandwidth``.
"""

import hashlib
import json
import random
from dataclasses import dataclass, field

from ..edge import EdgeConfig, EdgeNode
from ..errors import InvalidConfigError, UnavailableError
from ..fog import Fabric, FogConfig, FogNode
from ..overlay import OverlayTopology, build_overlay
from ..placement import reliability_satisfied

GB = 1_000_000_000

#: Modeled link characteristics (virtual seconds, bytes per virtual second).
HOP_LATENCY = 0.010
BANDWIDTH = 11_250_000.0  # 90 Mbps


def derive_seed(seed: int, label: str) -> int:
    """Stable sub-seed derivation, independent of process hash randomization."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class ClusterSpec:
    fog_count: int = 4
    edges_per_fog: int = 4
    buddies: int = 1
    rel_mean: float = 0.90
    rel_std: float = 0.03
    edge_capacity: int = 16 * GB
    heartbeat_interval: float = 1.0
    seed: int = 42
    transport: str = "simulated"
    bucket_count: int = 16
    min_replicas: int = 2
    max_replicas: int = 5

    def __post_init__(self):
        if self.fog_count < 1:
            raise InvalidConfigError("fog_count must be >= 1")
        if self.edges_per_fog < 1:
            raise InvalidConfigError("edges_per_fog must be >= 1")
        if not 0 <= self.buddies < self.fog_count:
            raise InvalidConfigError("buddies must satisfy 0 <= b < fog_count")
        if self.transport not in ("simulated", "socket"):
            raise InvalidConfigError(f"unknown transport {self.transport!r}")

    def to_wire(self) -> dict:
        return {
            "fog_count": self.fog_count,
            "edges_per_fog": self.edges_per_fog,
            "buddies": self.buddies,
            "rel_mean": self.rel_mean,
            "rel_std": self.rel_std,
            "edge_capacity": self.edge_capacity,
            "heartbeat_interval": self.heartbeat_interval,
            "seed": self.seed,
            "transport": self.transport,
            "bucket_count": self.bucket_count,
            "min_replicas": self.min_replicas,
            "max_replicas": self.max_replicas,
        }


def clamp_reliability(value: float) -> float:
    """Keep sampled reliabilities inside (0.5, 0.999)."""
    return min(max(value, 0.5 + 1e-6), 0.999 - 1e-6)


class SimFabric(Fabric):
    """Direct-dispatch transport with hop, byte, and message accounting."""

    supports_threads = False

    def __init__(self) -> None:
        self.clock = 0.0
        self.fogs: dict[int, FogNode] = {}
        self.edge_nodes: dict[str, EdgeNode] = {}
        self.control_messages = 0
        self.control_bytes = 0
        self.data_bytes = 0
        self.data_hops = 0

    def now(self) -> float:
        return self.clock

    def advance(self, dt: float) -> None:
        self.clock += dt

    def _account(self, args: dict, payload: bytes | None, response_payload: bytes | None) -> None:
        self.control_messages += 1
        self.control_bytes += 24 + len(json.dumps(args, separators=(",", ":"), default=str))
        for p in (payload, response_payload):
            if p is not None:
                self.data_hops += 1
                self.data_bytes += len(p)

    def snapshot(self) -> tuple[int, int, int, int]:
        return (self.control_messages, self.control_bytes, self.data_bytes, self.data_hops)

    def cost_since(self, snap: tuple[int, int, int, int]) -> float:
        msgs = self.control_messages - snap[0]
        cbytes = self.control_bytes - snap[1]
        dbytes = self.data_bytes - snap[2]
        return msgs * HOP_LATENCY + (cbytes + dbytes) / BANDWIDTH

    def call_fog(self, dst: int, op: str, args: dict, payload: bytes | None = None):
        node = self.fogs.get(dst)
        if node is None:
            raise UnavailableError(f"fog {dst} unreachable")
        result, out = node.handle(op, args, payload)
        self._account(args, payload, out)
        return result, out

    def call_edge(self, dst: str, op: str, args: dict, payload: bytes | None = None):
        node = self.edge_nodes.get(dst)
        if node is None or not node.alive:
            raise UnavailableError(f"edge {dst} unreachable")
        result, out = node.handle(op, args, payload)
        self._account(args, payload, out)
        return result, out

    def client_call(self, fog_id: int, op: str, args: dict, payload: bytes | None = None):
        """An operation a client pushes to its parent fog (one extra leg)."""
        return self.call_fog(fog_id, op, args, payload)


@dataclass
class BlockLedgerEntry:
    stream_id: str
    block_id: str
    size: int
    md5: str
    stored_round: int
    writer_fog: int
    replica_fogs: list[int]


class SimCluster:
    """Cluster handle: nodes, scheduling, failure injection, audits."""

    def __init__(self, spec: ClusterSpec):
        self.spec = spec
        self.fabric = SimFabric()
        fog_ids = list(range(1, spec.fog_count + 1))
        self.topology: OverlayTopology = build_overlay(fog_ids, spec.buddies)
        config = FogConfig(
            heartbeat_interval=spec.heartbeat_interval,
            bucket_count=spec.bucket_count,
            min_replicas=spec.min_replicas,
            max_replicas=spec.max_replicas,
            default_lease_duration=100.0,
        )
        self.fogs: dict[int, FogNode] = {
            fid: FogNode(
                fid,
                self.topology,
                self.fabric,
                config,
                rng_seed=derive_seed(spec.seed, f"fog:{fid}"),
            )
            for fid in fog_ids
        }
        self.fabric.fogs = self.fogs

        rel_rng = random.Random(derive_seed(spec.seed, "reliability"))
        self.edges: dict[str, EdgeNode] = {}
        self.edge_parent: dict[str, int] = {}
        for fid in fog_ids:
            for k in range(1, spec.edges_per_fog + 1):
                edge_id = f"e{fid}.{k}"
                reliability = clamp_reliability(rel_rng.gauss(spec.rel_mean, spec.rel_std))
                node = EdgeNode(
                    EdgeConfig(
                        edge_id,
                        fid,
                        reliability,
                        spec.edge_capacity,
                        spec.heartbeat_interval,
                    ),
                    clock=self.fabric.now,
                )
                self.edges[edge_id] = node
                self.edge_parent[edge_id] = fid
        self.fabric.edge_nodes = self.edges

        self.round = 0
        self.block_ledger: list[BlockLedgerEntry] = []
        self.stream_ledger: list[dict] = []
        self.matrix_series: list[dict] = []
        self.recovery_history: list[dict] = []
        self.workload_history: list[dict] = []

    # Round machinery -------------------------------------------------------

    def run_round(self, client_phase=None) -> None:
        self.round += 1
        self.fabric.advance(self.spec.heartbeat_interval)
        self._heartbeat_phase()
        self._dissemination_phase()
        self._failure_phase()
        self._sample_matrix()
        if client_phase is not None:
            client_phase()

    def _heartbeat_phase(self) -> None:
        for edge_id in sorted(self.edges):
            edge = self.edges[edge_id]
            if not edge.alive:
                continue
            report = edge.heartbeat_payload()
            response, _ = self.fabric.call_fog(self.edge_parent[edge_id], "heartbeat", report)
            edge.acknowledge_heartbeat(response)

    def _dissemination_phase(self) -> None:
        topo = self.topology
        # Pool members report to their buddy.
        for buddy in topo.buddy_set:
            for member in sorted(topo.neighbor_map[buddy]):
                self.fabric.call_fog(buddy, "pool_update", self.fogs[member].local_bundle())
        # Buddies exchange pool digests.
        digests = {buddy: self.fogs[buddy].buddy_bundle() for buddy in topo.buddy_set}
        for src in topo.buddy_set:
            for dst in topo.buddy_set:
                if src != dst:
                    self.fabric.call_fog(dst, "buddy_update", digests[src])
        # Buddies broadcast the assembled view back to their pool members.
        for buddy in topo.buddy_set:
            members = topo.pool_members(buddy)
            if len(members) == 1:
                continue
            sibling_bundles = {m: self.fogs[m].local_bundle() for m in members}
            buddy_bundles = {
                b: digests[b] for b in topo.buddy_set if b != buddy
            }
            bundle = self.fogs[buddy].pool_broadcast_bundle(sibling_bundles, buddy_bundles)
            for member in sorted(members):
                if member != buddy:
                    self.fabric.call_fog(member, "pool_broadcast", bundle)

    def _failure_phase(self) -> None:
        for fid in sorted(self.fogs):
            before = len(self.fogs[fid].recovery_reports)
            self.fogs[fid].detect_failures()
            for report in self.fogs[fid].recovery_reports[before:]:
                enriched = dict(report)
                enriched["fog_id"] = fid
                enriched["round"] = self.round
                self.recovery_history.append(enriched)

    def _sample_matrix(self) -> None:
        try:
            g = self.fogs[min(self.fogs)].global_matrix()
        except UnavailableError:
            return
        self.matrix_series.append(
            {
                "round": self.round,
                "r_med": g.r_med,
                "s_med": g.s_med,
                "edge_total": g.total_edges,
                "quadrants": {q.value: g.quadrant_counts[q] for q in sorted(g.quadrant_counts)},
            }
        )

    # Lifecycle --------------------------------------------------------------

    def warm_up(self, rounds: int = 3) -> None:
        for _ in range(rounds):
            self.run_round()
        if not self.converged():
            raise UnavailableError("cluster failed to converge during warm-up")

    def converged(self) -> bool:
        """Every fog holds a summary for every partition with live edges."""
        expected = {
            self.edge_parent[eid] for eid, e in self.edges.items() if e.alive
        }
        for fog in self.fogs.values():
            if not expected <= set(fog.summaries_snapshot()):
                return False
        return True

    # Failure injection -------------------------------------------------------

    def live_edges(self) -> list[str]:
        return sorted(eid for eid, e in self.edges.items() if e.alive)

    def least_reliable_live_edge(self) -> str | None:
        live = self.live_edges()
        if not live:
            return None
        return min(live, key=lambda eid: (self.edges[eid].reliability, eid))

    def kill_edge(self, edge_id: str) -> None:
        self.edges[edge_id].alive = False

    def revive_edge(self, edge_id: str) -> None:
        self.edges[edge_id].alive = True

    # Audits -------------------------------------------------------------------

    def durability_audit(self) -> dict:
        """Re-check the reliability inequality from actual hosting edges."""
        checked = 0
        violations = []
        for fid in sorted(self.fogs):
            fog = self.fogs[fid]
            for sid in sorted(fog.streams):
                rec = fog.streams[sid]
                for bid, _md5 in rec.block_registry:
                    checked += 1
                    reliabilities = self._hosting_reliabilities(sid, bid)
                    if not reliability_satisfied(rec.reliability, reliabilities):
                        violations.append(
                            {
                                "stream_id": sid,
                                "block_id": bid,
                                "target": rec.reliability,
                                "edges": len(reliabilities),
                            }
                        )
        return {"checked": checked, "violations": violations, "pass": not violations}

    def _hosting_reliabilities(self, sid: str, bid: str) -> list[float]:
        out = []
        for fid in sorted(self.fogs):
            for edge_id, entry in sorted(self.fogs[fid].edges.items()):
                if entry.alive and (sid, bid) in entry.hosted_blocks:
                    out.append(entry.stat.reliability)
        return out

    def coherence_audit(self) -> dict:
        """Partition index pairs must equal the union of edge hosted blocks."""
        mismatches = []
        for fid in sorted(self.fogs):
            fog = self.fogs[fid]
            indexed = {
                (edge_id, ref) for edge_id, ref in fog.index.block_pairs()
            }
            hosted = set()
            for edge_id, entry in fog.edges.items():
                if not entry.alive:
                    continue
                for sid, bid in entry.hosted_blocks:
                    hosted.add((edge_id, f"{sid}/{bid}"))
            if indexed != hosted:
                mismatches.append(
                    {"fog_id": fid, "extra": sorted(indexed - hosted), "missing": sorted(hosted - indexed)}
                )
        return {"pass": not mismatches, "mismatches": mismatches}


def spawn_cluster(spec: ClusterSpec) -> SimCluster:
    """Build the cluster and run warm-up rounds until state has converged."""
    if spec.transport != "simulated":
        raise InvalidConfigError("spawn_cluster builds simulated clusters; use elfstore.server for sockets")
    cluster = SimCluster(spec)
    cluster.warm_up()
    return cluster


def make_payload(sid: str, bid: str, size: int) -> bytes:
    """Deterministic pseudo-random payload for a block."""
    seed = hashlib.sha256(f"{sid}/{bid}".encode()).digest()
    reps = size // len(seed) + 1
    return (seed * reps)[:size]
