"""Deterministic client workloads over a simulated cluster.

Clients are pinned to edges round-robin across fogs (edges are the
predominant writers), execute one operation per simulated round in client
id order, and draw every random choice from a per-client seeded generator,
so a (cluster spec, workload spec, seed) triple fully determines the run.

Leased puts follow the polling protocol: a client that cannot acquire the
stream lease simply retries on later rounds; a holder renews when the lease
is close to expiry and otherwise appends its blocks back to back.
"""

import random
from dataclasses import dataclass, field

from ..errors import ElfStoreError, StaleVersionError
from .metrics import summarize_latencies
from .sim import BlockLedgerEntry, SimCluster, derive_seed, make_payload


@dataclass(frozen=True)
class WorkloadSpec:
    clients: int = 16
    op_mix: tuple[tuple[str, float], ...] = (("put", 1.0),)
    blocks_per_client: int = 100
    block_sizes: tuple[tuple[int, float], ...] = ((262_144, 1.0),)
    stream_reliabilities: tuple[tuple[float, float], ...] = ((0.99, 1.0),)
    leasing: bool = False
    min_replicas: int | None = None
    max_replicas: int | None = None
    single_shared_stream: bool = False
    label: str = "workload"

    def __post_init__(self):
        for name, probs in (
            ("op_mix", [w for _, w in self.op_mix]),
            ("block_sizes", [w for _, w in self.block_sizes]),
            ("stream_reliabilities", [w for _, w in self.stream_reliabilities]),
        ):
            total = sum(probs)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"{name} probabilities sum to {total}, expected 1")

    def to_wire(self) -> dict:
        return {
            "clients": self.clients,
            "op_mix": [[op, w] for op, w in self.op_mix],
            "blocks_per_client": self.blocks_per_client,
            "block_sizes": [[s, w] for s, w in self.block_sizes],
            "stream_reliabilities": [[r, w] for r, w in self.stream_reliabilities],
            "leasing": self.leasing,
            "min_replicas": self.min_replicas,
            "max_replicas": self.max_replicas,
            "single_shared_stream": self.single_shared_stream,
            "label": self.label,
        }


def weighted_choice(rng: random.Random, pairs) -> object:
    roll = rng.random()
    cum = 0.0
    for value, weight in pairs:
        cum += weight
        if roll < cum:
            return value
    return pairs[-1][0]


class _Collector:
    def __init__(self) -> None:
        self.latencies: dict[str, list[float]] = {}
        self.counts: dict[str, int] = {}
        self.errors: dict[str, int] = {}
        self.replication: dict[int, int] = {}
        self.get_local = 0
        self.get_remote = 0
        self.get_integrity_failures = 0
        self.find_hops: dict[int, int] = {}
        self.find_misses = 0
        self.meta_successes: dict[str, int] = {}
        self.meta_stale: list[dict] = []
        self.lease_acquired = 0
        self.lease_polls = 0
        self.lease_renewals = 0
        self.skipped = 0

    def bump(self, key: str, n: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + n

    def record_latency(self, op: str, cost: float) -> None:
        self.latencies.setdefault(op, []).append(cost)

    def record_error(self, exc: ElfStoreError) -> None:
        self.errors[exc.code] = self.errors.get(exc.code, 0) + 1


class SimClient:
    def __init__(self, index: int, cluster: SimCluster, spec: WorkloadSpec, collector: _Collector):
        self.index = index
        self.client_id = f"c{index}"
        self.cluster = cluster
        self.spec = spec
        self.collector = collector
        fog_count = cluster.spec.fog_count
        fog = (index % fog_count) + 1
        slot = (index // fog_count) % cluster.spec.edges_per_fog + 1
        self.edge_id = f"e{fog}.{slot}"
        self.fog_id = fog
        self.rng = random.Random(derive_seed(cluster.spec.seed, f"client:{spec.label}:{index}"))
        self.ops_done = 0
        self.put_seq = 0
        self.stream_id: str | None = None
        self.lease: dict | None = None
        self.meta_pending: tuple[str, int] | None = None

    # The stream this client appends to.

    def target_stream(self) -> str:
        if self.spec.single_shared_stream:
            return "shared"
        assert self.stream_id is not None
        return self.stream_id

    def done(self) -> bool:
        return self.ops_done >= self.spec.blocks_per_client

    def _timed(self, op_name: str, fog_id: int, op: str, args: dict, payload=None):
        fabric = self.cluster.fabric
        snap = fabric.snapshot()
        try:
            result = fabric.client_call(fog_id, op, args, payload)
            return result
        finally:
            self.collector.record_latency(op_name, fabric.cost_since(snap))

    def step(self) -> None:
        op = weighted_choice(self.rng, self.spec.op_mix)
        handler = {
            "put": self._step_put,
            "get": self._step_get,
            "find": self._step_find,
            "meta_update": self._step_meta,
        }[op]
        handler()

    # Ops -------------------------------------------------------------------

    def _lease_remaining(self) -> float:
        if self.lease is None:
            return 0.0
        return self.lease["expiry"] - self.cluster.fabric.now()

    def _step_put(self) -> None:
        sid = self.target_stream()
        if self.spec.leasing:
            interval = self.cluster.spec.heartbeat_interval
            if self.lease is None or self._lease_remaining() <= 0:
                try:
                    result, _ = self._timed(
                        "open", self.fog_id, "open_stream",
                        {"stream_id": sid, "client_id": self.client_id},
                    )
                    self.lease = {
                        "client_id": self.client_id,
                        "session_key": result["session_key"],
                        "expiry": result["expiry"],
                    }
                    self.collector.lease_acquired += 1
                except ElfStoreError as exc:
                    self.collector.lease_polls += 1
                    self.collector.record_error(exc)
                return  # acquired or polled; put on a later round
            if self._lease_remaining() <= 3 * interval:
                try:
                    result, _ = self._timed(
                        "renew", self.fog_id, "renew_lease",
                        {
                            "stream_id": sid,
                            "client_id": self.client_id,
                            "session_key": self.lease["session_key"],
                        },
                    )
                    self.lease["expiry"] = result["expiry"]
                    self.collector.lease_renewals += 1
                except ElfStoreError as exc:
                    self.collector.record_error(exc)
                    self.lease = None
                return
        bid = f"{self.client_id}-b{self.put_seq}"
        self.put_seq += 1
        size = weighted_choice(self.rng, self.spec.block_sizes)
        payload = make_payload(sid, bid, size)
        args = {
            "stream_id": sid,
            "block_id": bid,
            "props": [["writer", self.client_id], ["seq", self.put_seq]],
            "client_id": self.client_id,
            "client_is_edge": True,
        }
        if self.spec.min_replicas is not None:
            args["min_replicas"] = self.spec.min_replicas
        if self.spec.max_replicas is not None:
            args["max_replicas"] = self.spec.max_replicas
        if self.lease is not None:
            args["lease"] = {
                "client_id": self.client_id,
                "session_key": self.lease["session_key"],
            }
        self.collector.bump("put_attempts")
        try:
            result, _ = self._timed("put", self.fog_id, "put_block", args, payload)
        except ElfStoreError as exc:
            self.collector.record_error(exc)
            self.collector.bump("put_failed")
            self.ops_done += 1
            return
        q = result["q"]
        self.collector.replication[q] = self.collector.replication.get(q, 0) + 1
        self.collector.bump("put_ok")
        import hashlib

        self.cluster.block_ledger.append(
            BlockLedgerEntry(
                sid,
                bid,
                size,
                hashlib.md5(payload).hexdigest(),
                self.cluster.round,
                self.fog_id,
                result["replica_fogs"],
            )
        )
        self.ops_done += 1

    def _settled_blocks(self) -> list[BlockLedgerEntry]:
        return [e for e in self.cluster.block_ledger if e.stored_round < self.cluster.round]

    def _step_get(self) -> None:
        pool = self._settled_blocks()
        if not pool:
            self.collector.skipped += 1
            self.ops_done += 1
            return
        entry = pool[self.rng.randrange(len(pool))]
        self.collector.bump("get_attempts")
        try:
            result, payload = self._timed(
                "get", self.fog_id, "get_block",
                {"stream_id": entry.stream_id, "block_id": entry.block_id},
            )
        except ElfStoreError as exc:
            self.collector.record_error(exc)
            self.collector.bump("get_failed")
            self.ops_done += 1
            return
        if result["md5"] != entry.md5:
            self.collector.get_integrity_failures += 1
        if result["local"]:
            self.collector.get_local += 1
        else:
            self.collector.get_remote += 1
        self.ops_done += 1

    def _step_find(self) -> None:
        pool = self._settled_blocks()
        if not pool:
            self.collector.skipped += 1
            self.ops_done += 1
            return
        entry = pool[self.rng.randrange(len(pool))]
        query = [["streamId", entry.stream_id], ["blockId", entry.block_id]]
        self.collector.bump("find_attempts")
        try:
            result, _ = self._timed("find", self.fog_id, "find_block", {"query": query})
        except ElfStoreError as exc:
            self.collector.record_error(exc)
            self.ops_done += 1
            return
        matched = any(
            m["stream_id"] == entry.stream_id and m["block_id"] == entry.block_id
            for m in result["matches"]
        )
        if matched:
            hops = result["hops"]
            self.collector.find_hops[hops] = self.collector.find_hops.get(hops, 0) + 1
        else:
            self.collector.find_misses += 1
        self.ops_done += 1

    def _step_meta(self) -> None:
        streams = [s["stream_id"] for s in self.cluster.stream_ledger]
        if not streams:
            self.collector.skipped += 1
            self.ops_done += 1
            return
        if self.meta_pending is None:
            sid = streams[self.rng.randrange(len(streams))]
            try:
                result, _ = self._timed(
                    "get_meta", self.fog_id, "get_stream_meta", {"stream_id": sid}
                )
                self.meta_pending = (sid, result["version"])
            except ElfStoreError as exc:
                self.collector.record_error(exc)
            self.ops_done += 1
            return
        sid, version = self.meta_pending
        self.meta_pending = None
        props = {"note": f"{self.client_id}-{self.ops_done}"}
        self.collector.bump("meta_attempts")
        try:
            self._timed(
                "update_meta", self.fog_id, "update_stream_meta",
                {"stream_id": sid, "props": props, "version": version},
            )
            self.collector.meta_successes[sid] = self.collector.meta_successes.get(sid, 0) + 1
            self.collector.bump("meta_ok")
        except StaleVersionError as exc:
            self.collector.meta_stale.append(
                {"stream_id": sid, "passed": version, "current": exc.current_version}
            )
            self.collector.bump("meta_stale")
        except ElfStoreError as exc:
            self.collector.record_error(exc)
        self.ops_done += 1


def _create_streams(cluster: SimCluster, spec: WorkloadSpec, clients: list[SimClient], collector: _Collector) -> None:
    if spec.single_shared_stream:
        first = clients[0]
        r = weighted_choice(first.rng, spec.stream_reliabilities)
        result, _ = first._timed(
            "create", first.fog_id, "create_stream",
            {
                "stream_id": "shared",
                "smeta": [["kind", "shared", "static"], ["note", "", "dynamic"]],
                "reliability": r,
            },
        )
        cluster.stream_ledger.append(
            {"stream_id": "shared", "owner_fog": result["owner_fog"], "reliability": r}
        )
        return
    for client in clients:
        sid = f"s-{spec.label}-{client.client_id}"
        r = weighted_choice(client.rng, spec.stream_reliabilities)
        result, _ = client._timed(
            "create", client.fog_id, "create_stream",
            {
                "stream_id": sid,
                "smeta": [
                    ["writer", client.client_id, "static"],
                    ["note", "", "dynamic"],
                ],
                "reliability": r,
            },
        )
        client.stream_id = sid
        cluster.stream_ledger.append(
            {"stream_id": sid, "owner_fog": result["owner_fog"], "reliability": r}
        )


def run_workload(cluster: SimCluster, spec: WorkloadSpec, max_rounds: int | None = None) -> dict:
    """Drive the workload to completion and append its report section."""
    collector = _Collector()
    clients = [SimClient(i, cluster, spec, collector) for i in range(spec.clients)]
    needs_streams = any(op in ("put", "meta_update") for op, w in spec.op_mix if w > 0)
    if needs_streams and not (spec.single_shared_stream and any(
        s["stream_id"] == "shared" for s in cluster.stream_ledger
    )):
        _create_streams(cluster, spec, clients, collector)
    cluster.run_round()  # let stream registrations disseminate

    cap = max_rounds or max(1000, spec.blocks_per_client * 50)
    start_round = cluster.round
    active = [c for c in clients if not c.done()]
    while active and cluster.round - start_round < cap:
        def client_phase():
            for client in active:
                client.step()

        cluster.run_round(client_phase)
        active = [c for c in clients if not c.done()]
    for _ in range(2):
        cluster.run_round()  # settle indexes and statistics

    section = _build_section(cluster, spec, collector, cluster.round - start_round)
    cluster.workload_history.append(section)
    return section


def _build_section(cluster: SimCluster, spec: WorkloadSpec, c: _Collector, rounds: int) -> dict:
    gets = c.get_local + c.get_remote
    per_stream_meta = {}
    for sid in sorted(c.meta_successes):
        owner = next(s["owner_fog"] for s in cluster.stream_ledger if s["stream_id"] == sid)
        version = cluster.fogs[owner].streams[sid].version
        per_stream_meta[sid] = {
            "successes": c.meta_successes[sid],
            "final_version": version,
        }
    total_puts = sum(c.replication.values())
    mean_q = (
        sum(q * n for q, n in c.replication.items()) / total_puts if total_puts else 0.0
    )
    return {
        "label": spec.label,
        "spec": spec.to_wire(),
        "rounds": rounds,
        "ops": {name: summarize_latencies(vals) for name, vals in sorted(c.latencies.items())},
        "counts": dict(sorted(c.counts.items())),
        "errors": dict(sorted(c.errors.items())),
        "replication_histogram": {str(q): n for q, n in sorted(c.replication.items())},
        "replication_mean": mean_q,
        "local_reads": {
            "local": c.get_local,
            "remote": c.get_remote,
            "fraction": c.get_local / gets if gets else 0.0,
            "integrity_failures": c.get_integrity_failures,
        },
        "find": {
            "hops_histogram": {str(h): n for h, n in sorted(c.find_hops.items())},
            "misses": c.find_misses,
        },
        "meta": {
            "per_stream": per_stream_meta,
            "stale_events": sorted(
                c.meta_stale, key=lambda e: (e["stream_id"], e["passed"], e["current"])
            ),
        },
        "lease": {
            "acquisitions": c.lease_acquired,
            "polls": c.lease_polls,
            "renewals": c.lease_renewals,
        },
        "skipped_ops": c.skipped,
    }


def inject_edge_failure(cluster: SimCluster, policy: str = "least_reliable") -> str:
    """Kill an edge; it stops heartbeating and serving immediately."""
    if policy == "least_reliable":
        edge_id = cluster.least_reliable_live_edge()
        if edge_id is None:
            raise ElfStoreError("no live edges to fail")
    else:
        edge_id = policy
        if edge_id not in cluster.edges or not cluster.edges[edge_id].alive:
            raise ElfStoreError(f"edge {edge_id} is not live")
    cluster.kill_edge(edge_id)
    return edge_id


def await_recovery(cluster: SimCluster, edge_id: str, max_rounds: int = 30) -> dict:
    """Advance rounds until the parent fog has recovered the edge's blocks."""
    for _ in range(max_rounds):
        report = next(
            (r for r in cluster.recovery_history if r["failed_edge"] == edge_id), None
        )
        if report is not None:
            cluster.run_round()  # let replica-set updates disseminate
            audit = cluster.durability_audit()
            return {
                "failed_edge": edge_id,
                "blocks_lost": report["blocks_lost"],
                "blocks_recovered": report["blocks_recovered"],
                "complete": report["blocks_recovered"] == report["blocks_lost"],
                "durability_audit": audit,
                "detected_round": report["round"],
            }
        cluster.run_round()
    raise TimeoutError(f"edge {edge_id} failure not recovered within {max_rounds} rounds")
