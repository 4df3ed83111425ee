"""Replica placement against the global matrix.

A block with reliability target r needs q replicas on edges with
reliabilities r_i such that (1 - r) >= prod(1 - r_i), q bounded by the
user's min/max. Fogs plan with summaries only, so each chosen fog
contributes a conservative reliability: its minimum if the replica is
steered at a low-reliability local quadrant (HL, LL), its median for a
high-reliability one (HH, LH) -- the edge the fog actually picks can only
be at least that reliable.

Fog selection walks global quadrants in a Z-order-like sequence that
alternates between the two high-storage quadrants (HH, HL) and steers each
fog toward edges on the opposite side of the reliability median, so
capacity is consumed around the medians and extreme-reliability edges are
preserved for pairing later. LH and LL serve as fallbacks once the
high-storage quadrants are exhausted. Within a quadrant the fog is drawn
uniformly at random from a seeded generator, keeping plans reproducible.
"""

import random
from dataclasses import dataclass, field

from .errors import InsufficientCapacityError, NoCapacityError, NoEdgesError
from .stats import (
    EdgeStat,
    GlobalMatrix,
    LOW_RELIABILITY_QUADRANTS,
    PartitionSummary,
    Quadrant,
)

#: Local-quadrant preference when steering a fog of a given global class:
#: the complementary-reliability pair first, then the remaining quadrants.
COMPLEMENTARY_HINTS: dict[Quadrant, tuple[Quadrant, ...]] = {
    Quadrant.HH: (Quadrant.HL, Quadrant.LL, Quadrant.HH, Quadrant.LH),
    Quadrant.HL: (Quadrant.HH, Quadrant.LH, Quadrant.HL, Quadrant.LL),
    Quadrant.LH: (Quadrant.HL, Quadrant.LL, Quadrant.LH, Quadrant.HH),
    Quadrant.LL: (Quadrant.HH, Quadrant.LH, Quadrant.LL, Quadrant.HL),
}

#: Hint preference for the first, client-local replica: median-reliability
#: edges first (high-storage before low), extremes kept in reserve.
LOCAL_FIRST_HINTS: tuple[Quadrant, ...] = (
    Quadrant.HH,
    Quadrant.LH,
    Quadrant.HL,
    Quadrant.LL,
)

_GLOBAL_FALLBACK = (Quadrant.LH, Quadrant.LL)


@dataclass(frozen=True)
class ReplicaRequirement:
    block_size: int
    target_reliability: float
    min_replicas: int
    max_replicas: int
    client_fog: int | None = None
    client_is_edge: bool = False

    def __post_init__(self):
        if not 0.0 < self.target_reliability < 1.0:
            raise ValueError("target_reliability must be in (0, 1)")
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 1 <= min_replicas <= max_replicas")


@dataclass
class ReplicaPlan:
    choices: list[tuple[int, Quadrant]]
    achieved_reliability_bound: float
    forced_reuse: bool = False
    reliability_unmet: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def replica_count(self) -> int:
        return len(self.choices)

    @property
    def fog_ids(self) -> list[int]:
        return [fog for fog, _ in self.choices]


def reliability_satisfied(target: float, edge_reliabilities: list[float]) -> bool:
    """True when the replica set's combined loss bound meets the target."""
    if not edge_reliabilities:
        return False
    residual = 1.0
    for r in edge_reliabilities:
        residual *= 1.0 - r
    return (1.0 - target) >= residual


def contribution_of(summary: PartitionSummary, hint: Quadrant) -> float:
    """Conservative reliability a fog adds when steered at ``hint``."""
    if summary.quadrant_count(hint) <= 0:
        raise NoEdgesError(
            f"fog {summary.fog_id} has no edges in local quadrant {hint.value}"
        )
    if hint in LOW_RELIABILITY_QUADRANTS:
        return summary.r_min
    return summary.r_med


def _admissible_hint(
    summary: PartitionSummary, order: tuple[Quadrant, ...]
) -> Quadrant | None:
    for q in order:
        if summary.quadrant_count(q) > 0:
            return q
    return None


def choose_replica_fogs(
    g: GlobalMatrix,
    summaries: dict[int, PartitionSummary],
    req: ReplicaRequirement,
    rng_seed: int,
) -> ReplicaPlan:
    """Pick an ordered (fog, local-quadrant hint) list for a new block.

    Stops as soon as the conservative contributions satisfy the target with
    at least ``min_replicas`` copies, or at ``max_replicas`` (flagged
    ``reliability_unmet`` if the target is still short). Fogs stay distinct
    unless capacity forces reuse.
    """
    rng = random.Random(rng_seed)
    choices: list[tuple[int, Quadrant]] = []
    contributions: list[float] = []
    used: set[int] = set()
    forced_reuse = False
    warnings: list[str] = []

    def has_capacity(s: PartitionSummary) -> bool:
        return s.s_max >= req.block_size

    def satisfied() -> bool:
        return len(choices) >= req.min_replicas and reliability_satisfied(
            req.target_reliability, contributions
        )

    def take(fog_id: int, hint: Quadrant) -> None:
        choices.append((fog_id, hint))
        contributions.append(contribution_of(summaries[fog_id], hint))
        used.add(fog_id)

    if req.client_is_edge and req.client_fog is not None:
        local = summaries.get(req.client_fog)
        if local is not None and has_capacity(local):
            hint = _admissible_hint(local, LOCAL_FIRST_HINTS)
            if hint is not None:
                take(req.client_fog, hint)

    step = 0
    while not satisfied() and len(choices) < req.max_replicas:
        primary, secondary = (
            (Quadrant.HH, Quadrant.HL) if step % 2 == 0 else (Quadrant.HL, Quadrant.HH)
        )
        step += 1
        picked = False
        for global_q in (primary, secondary, *_GLOBAL_FALLBACK):
            hint_order = COMPLEMENTARY_HINTS[global_q]
            candidates = sorted(
                fog_id
                for fog_id, s in summaries.items()
                if g.fog_class.get(fog_id) == global_q
                and (forced_reuse or fog_id not in used)
                and has_capacity(s)
                and _admissible_hint(s, hint_order) is not None
            )
            if not candidates:
                continue
            fog_id = rng.choice(candidates)
            take(fog_id, _admissible_hint(summaries[fog_id], hint_order))
            picked = True
            break
        if not picked:
            if not forced_reuse and used:
                # Every distinct fog is used or full; only now may a fog
                # receive a second replica (on a different edge).
                forced_reuse = True
                warnings.append("capacity forced fog reuse")
                continue
            break

    if len(choices) < req.min_replicas:
        raise InsufficientCapacityError(
            f"only {len(choices)} of {req.min_replicas} required replicas placeable"
        )
    unmet = not reliability_satisfied(req.target_reliability, contributions)
    if unmet:
        warnings.append(
            f"reliability target {req.target_reliability} not met by "
            f"{len(choices)} replicas (conservative bound)"
        )
    residual = 1.0
    for c in contributions:
        residual *= 1.0 - c
    return ReplicaPlan(
        choices,
        achieved_reliability_bound=1.0 - residual,
        forced_reuse=forced_reuse,
        reliability_unmet=unmet,
        warnings=warnings,
    )


def edge_quadrant(stat: EdgeStat, summary: PartitionSummary) -> Quadrant:
    """Local quadrant of an edge relative to its partition medians."""
    storage = "H" if stat.free_storage >= summary.s_med else "L"
    reliability = "H" if stat.reliability >= summary.r_med else "L"
    return Quadrant(storage + reliability)


def choose_edge_in_fog(
    stats: list[EdgeStat],
    summary: PartitionSummary,
    hint: Quadrant,
    block_size: int,
) -> str:
    """Least-reliable edge with space in the hinted quadrant.

    Falls back to the remaining edges (any quadrant, least reliability
    first) when the hinted quadrant has no edge that fits; ties break on
    edge id.
    """
    fitting = [e for e in stats if e.free_storage >= block_size]
    if not fitting:
        raise NoCapacityError(f"fog {summary.fog_id}: no edge can fit {block_size} bytes")
    hinted = [e for e in fitting if edge_quadrant(e, summary) == hint]
    pool = hinted or fitting
    return min(pool, key=lambda e: (e.reliability, e.edge_id)).edge_id


def choose_recovery_fog(
    g: GlobalMatrix,
    summaries: dict[int, PartitionSummary],
    failed_edge_reliability: float,
    block_size: int,
    exclude: set[int],
) -> tuple[int, Quadrant]:
    """Replacement fog whose conservative contribution best matches a lost edge.

    ``exclude`` carries the fogs already holding surviving replicas; among
    the rest, every non-empty local quadrant with capacity is a candidate
    and the closest contribution wins (ties: lower fog id, then quadrant
    declaration order).
    """
    best: tuple[float, int, int] | None = None
    best_choice: tuple[int, Quadrant] | None = None
    for fog_id in sorted(summaries):
        if fog_id in exclude:
            continue
        s = summaries[fog_id]
        if s.s_max < block_size:
            continue
        for idx, hint in enumerate(Quadrant):
            if s.quadrant_count(hint) <= 0:
                continue
            contribution = contribution_of(s, hint)
            key = (abs(contribution - failed_edge_reliability), fog_id, idx)
            if best is None or key < best:
                best = key
                best_choice = (fog_id, hint)
    if best_choice is None:
        raise InsufficientCapacityError("no fog available for recovery replica")
    return best_choice
