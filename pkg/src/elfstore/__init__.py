"""Federated block storage over a two-tier fog/edge topology.

Reliable fog nodes form a super-peer overlay that indexes block metadata
with hierarchical Bloom filters, tracks approximate global reliability and
capacity statistics, and places block replicas on unreliable edges so every
stream's durability target holds, re-replicating when edges fail.
"""

__version__ = "0.1.0"

from .overlay import build_overlay, buddies_of, neighbors_of, route_class
from .placement import (
    ReplicaPlan,
    ReplicaRequirement,
    choose_edge_in_fog,
    choose_recovery_fog,
    choose_replica_fogs,
    reliability_satisfied,
)
from .stats import (
    EdgeStat,
    GlobalMatrix,
    PartitionSummary,
    Quadrant,
    build_global_matrix,
    classify_fog,
    summarize_partition,
)

__all__ = [
    "build_overlay",
    "buddies_of",
    "neighbors_of",
    "route_class",
    "ReplicaPlan",
    "ReplicaRequirement",
    "choose_edge_in_fog",
    "choose_recovery_fog",
    "choose_replica_fogs",
    "reliability_satisfied",
    "EdgeStat",
    "GlobalMatrix",
    "PartitionSummary",
    "Quadrant",
    "build_global_matrix",
    "classify_fog",
    "summarize_partition",
]
