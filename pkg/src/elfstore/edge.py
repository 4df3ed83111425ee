"""Edge peer: persists block replicas and reports to its parent fog.

Replicas live either in memory (simulation) or on disk, one file per
replica at ``<root>/<stream_id>/<block_id>.blk`` with a JSON metadata
sidecar. The edge piggybacks index tuples for newly stored blocks on its
heartbeats and clears them only once the parent fog acknowledges, so tuple
delivery is at-least-once; after a gap in acknowledgements it re-reports
every hosted block, which is what lets a restarted edge rejoin statelessly.
"""

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .bloom import Value
from .errors import IntegrityError, InvalidConfigError, NoCapacityError, NotFoundError


@dataclass(frozen=True)
class EdgeConfig:
    edge_id: str
    parent_fog: int
    reliability: float
    capacity: int
    heartbeat_interval: float = 30.0

    def __post_init__(self):
        if not 0.0 < self.reliability < 1.0:
            raise InvalidConfigError("edge reliability must be in (0, 1)")
        if self.capacity <= 0:
            raise InvalidConfigError("edge capacity must be positive")


@dataclass
class StoredReplica:
    stream_id: str
    block_id: str
    payload: bytes
    static_props: list[tuple[str, Value]]
    md5_checksum: str
    stored_at: float


class MemoryReplicaStore:
    def __init__(self) -> None:
        self._replicas: dict[tuple[str, str], StoredReplica] = {}

    def put(self, replica: StoredReplica) -> None:
        self._replicas[(replica.stream_id, replica.block_id)] = replica

    def get(self, stream_id: str, block_id: str) -> StoredReplica | None:
        return self._replicas.get((stream_id, block_id))

    def remove(self, stream_id: str, block_id: str) -> None:
        self._replicas.pop((stream_id, block_id), None)

    def keys(self) -> list[tuple[str, str]]:
        return sorted(self._replicas)


class DiskReplicaStore:
    """One ``.blk`` payload file plus a ``.meta`` JSON sidecar per replica."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, stream_id: str, block_id: str) -> tuple[Path, Path]:
        d = self.root / stream_id
        return d / f"{block_id}.blk", d / f"{block_id}.meta"

    def put(self, replica: StoredReplica) -> None:
        blk, meta = self._paths(replica.stream_id, replica.block_id)
        blk.parent.mkdir(parents=True, exist_ok=True)
        blk.write_bytes(replica.payload)
        meta.write_text(
            json.dumps(
                {
                    "stream_id": replica.stream_id,
                    "block_id": replica.block_id,
                    "static_props": replica.static_props,
                    "md5_checksum": replica.md5_checksum,
                    "stored_at": replica.stored_at,
                }
            )
        )

    def get(self, stream_id: str, block_id: str) -> StoredReplica | None:
        blk, meta = self._paths(stream_id, block_id)
        if not blk.exists() or not meta.exists():
            return None
        info = json.loads(meta.read_text())
        return StoredReplica(
            stream_id,
            block_id,
            blk.read_bytes(),
            [tuple(p) for p in info["static_props"]],
            info["md5_checksum"],
            info["stored_at"],
        )

    def remove(self, stream_id: str, block_id: str) -> None:
        blk, meta = self._paths(stream_id, block_id)
        for p in (blk, meta):
            if p.exists():
                p.unlink()

    def keys(self) -> list[tuple[str, str]]:
        found = []
        for blk in self.root.glob("*/*.blk"):
            found.append((blk.parent.name, blk.stem))
        return sorted(found)


class EdgeNode:
    """Single-mutator replica host speaking the fog wire protocol."""

    def __init__(self, config: EdgeConfig, store=None, clock=None):
        self.config = config
        self.store = store if store is not None else MemoryReplicaStore()
        self._clock = clock or (lambda: 0.0)
        self._lock = threading.RLock()
        self._used = 0
        self._pending: list[tuple[str, str]] = []  # block keys awaiting fog ack
        self._full_report_due = True  # first heartbeat announces everything
        self.alive = True

    @property
    def edge_id(self) -> str:
        return self.config.edge_id

    @property
    def free_storage(self) -> int:
        return self.config.capacity - self._used

    @property
    def reliability(self) -> float:
        return self.config.reliability

    def store_replica(
        self,
        stream_id: str,
        block_id: str,
        payload: bytes,
        props: list[tuple[str, Value]],
        checksum: str,
    ) -> dict:
        digest = hashlib.md5(payload).hexdigest()
        if digest != checksum:
            raise IntegrityError(
                f"payload digest {digest} does not match declared checksum"
            )
        with self._lock:
            existing = self.store.get(stream_id, block_id)
            delta = len(payload) - (len(existing.payload) if existing else 0)
            if delta > self.free_storage:
                raise NoCapacityError(
                    f"edge {self.edge_id}: {len(payload)} bytes exceed free space"
                )
            self.store.put(
                StoredReplica(stream_id, block_id, payload, list(props), checksum, self._clock())
            )
            self._used += delta
            if (stream_id, block_id) not in self._pending:
                self._pending.append((stream_id, block_id))
            return {"free_storage_after": self.free_storage}

    def read_replica(self, stream_id: str, block_id: str) -> StoredReplica:
        replica = self.store.get(stream_id, block_id)
        if replica is None:
            raise NotFoundError(f"edge {self.edge_id} holds no replica {stream_id}/{block_id}")
        if hashlib.md5(replica.payload).hexdigest() != replica.md5_checksum:
            raise IntegrityError(f"replica {stream_id}/{block_id} corrupt at rest")
        return replica

    def drop_replica(self, stream_id: str, block_id: str) -> None:
        with self._lock:
            replica = self.store.get(stream_id, block_id)
            if replica is None:
                return
            self.store.remove(stream_id, block_id)
            self._used -= len(replica.payload)
            if (stream_id, block_id) in self._pending:
                self._pending.remove((stream_id, block_id))

    def heartbeat_payload(self) -> dict:
        """Current stats plus index tuples accumulated since the last ack."""
        with self._lock:
            keys = self.store.keys() if self._full_report_due else list(self._pending)
            reports = []
            for sid, bid in keys:
                replica = self.store.get(sid, bid)
                if replica is None:
                    continue
                reports.append(
                    {
                        "stream_id": sid,
                        "block_id": bid,
                        "size": len(replica.payload),
                        "md5": replica.md5_checksum,
                        "props": [list(p) for p in replica.static_props],
                    }
                )
            return {
                "edge_id": self.edge_id,
                "reliability": self.config.reliability,
                "free_storage": self.free_storage,
                "blocks": reports,
                "full_report": self._full_report_due,
            }

    def acknowledge_heartbeat(self, response: dict) -> None:
        """Clear pending tuples on ack; queue a full re-report if asked."""
        with self._lock:
            if response.get("needs_full_report"):
                self._full_report_due = True
            else:
                self._pending.clear()
                self._full_report_due = False

    def hosted_keys(self) -> list[tuple[str, str]]:
        return self.store.keys()

    # Wire dispatch -------------------------------------------------------

    def handle(self, op: str, args: dict, payload: bytes | None):
        if op == "store_block":
            if payload is None:
                raise IntegrityError("store_block requires a payload frame")
            result = self.store_replica(
                args["stream_id"],
                args["block_id"],
                payload,
                [tuple(p) for p in args.get("props", [])],
                args["md5"],
            )
            return result, None
        if op == "read_block":
            replica = self.read_replica(args["stream_id"], args["block_id"])
            return (
                {
                    "props": [list(p) for p in replica.static_props],
                    "md5": replica.md5_checksum,
                },
                replica.payload,
            )
        if op == "drop_block":
            self.drop_replica(args["stream_id"], args["block_id"])
            return {"dropped": True}, None
        raise NotFoundError(f"edge op {op!r} not supported")
