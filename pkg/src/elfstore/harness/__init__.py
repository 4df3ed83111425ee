"""Deterministic cluster harness: simulation, workloads, failures, metrics."""

from .metrics import emit_report
from .sim import ClusterSpec, SimCluster, spawn_cluster
from .workload import WorkloadSpec, await_recovery, inject_edge_failure, run_workload

__all__ = [
    "ClusterSpec",
    "SimCluster",
    "spawn_cluster",
    "WorkloadSpec",
    "run_workload",
    "inject_edge_failure",
    "await_recovery",
    "emit_report",
]
