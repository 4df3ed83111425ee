"""Replica planning, edge choice, and recovery target selection."""

import itertools
import random

import pytest

from elfstore.errors import InsufficientCapacityError, NoCapacityError, NoEdgesError
from elfstore.placement import (
    ReplicaRequirement,
    choose_edge_in_fog,
    choose_recovery_fog,
    choose_replica_fogs,
    contribution_of,
    edge_quadrant,
    reliability_satisfied,
)
from elfstore.stats import (
    EdgeStat,
    PartitionSummary,
    Quadrant,
    build_global_matrix,
    summarize_partition,
)

GB = 1_000_000_000
MB = 1_000_000


def minimal_q_brute_force(target: float, rels: list[float], q_min: int, q_max: int) -> int | None:
    """Smallest subset size meeting the target, by exhaustive enumeration."""
    for size in range(q_min, q_max + 1):
        for combo in itertools.combinations(rels, size):
            if reliability_satisfied(target, list(combo)):
                return size
    return None


def greedy_minimal_q(target: float, rels: list[float], q_min: int, q_max: int) -> int | None:
    """Most-reliable-first accumulation until the target holds."""
    picked: list[float] = []
    for r in sorted(rels, reverse=True):
        picked.append(r)
        if len(picked) >= q_min and reliability_satisfied(target, picked):
            return len(picked)
        if len(picked) == q_max:
            return None
    return None


class TestReliabilitySatisfied:
    def test_three_edges_meet_three_nines(self):
        assert reliability_satisfied(0.999, [0.80, 0.91, 0.95])

    def test_two_good_edges_meet_three_nines(self):
        assert reliability_satisfied(0.999, [0.95, 0.99])

    def test_two_weak_edges_fail(self):
        assert not reliability_satisfied(0.999, [0.80, 0.91])

    def test_empty_is_false(self):
        assert not reliability_satisfied(0.9, [])

    def test_greedy_matches_subset_brute_force(self):
        rng = random.Random(77)
        for _ in range(300):
            n = rng.randrange(1, 9)
            rels = [round(rng.uniform(0.5, 0.999), 4) for _ in range(n)]
            target = rng.choice([0.9, 0.99, 0.999, 0.9999])
            assert greedy_minimal_q(target, rels, 1, n) == minimal_q_brute_force(
                target, rels, 1, n
            )


class TestContribution:
    summary = PartitionSummary(1, 0.8, 0.9, 0.95, 1 * GB, 2 * GB, 4 * GB, 2, 2, 2, 2)

    def test_low_reliability_hints_use_minimum(self):
        assert contribution_of(self.summary, Quadrant.LL) == 0.8
        assert contribution_of(self.summary, Quadrant.HL) == 0.8

    def test_high_reliability_hints_use_median(self):
        assert contribution_of(self.summary, Quadrant.HH) == 0.9
        assert contribution_of(self.summary, Quadrant.LH) == 0.9

    def test_single_edge_fog_hints_agree(self):
        s = summarize_partition(2, [EdgeStat("e1", 0.88, 1 * GB)])
        assert s.r_min == s.r_med
        assert contribution_of(s, Quadrant.HH) == contribution_of(s, Quadrant.HH)

    def test_empty_quadrant_rejected(self):
        s = PartitionSummary(1, 0.8, 0.9, 0.95, 1, 2, 4, 4, 0, 0, 0)
        with pytest.raises(NoEdgesError):
            contribution_of(s, Quadrant.LL)


def cluster_fixture(seed: int, fogs: int, edges_per_fog: int, mean: float, std: float):
    """Random fog population: (matrix, summaries, per-fog edge stats)."""
    rng = random.Random(seed)
    stats = {}
    summaries = {}
    for fid in range(1, fogs + 1):
        edges = [
            EdgeStat(
                f"e{fid}.{i}",
                min(max(rng.gauss(mean, std), 0.5), 0.999),
                16 * GB,
            )
            for i in range(edges_per_fog)
        ]
        stats[fid] = edges
        summaries[fid] = summarize_partition(fid, edges)
    g = build_global_matrix(list(summaries.values()), k=16)
    return g, summaries, stats


def replay_plan(g, summaries, req, rng_seed):
    """Independent re-derivation of the planner walk (test-side oracle)."""
    hints = {
        Quadrant.HH: (Quadrant.HL, Quadrant.LL, Quadrant.HH, Quadrant.LH),
        Quadrant.HL: (Quadrant.HH, Quadrant.LH, Quadrant.HL, Quadrant.LL),
        Quadrant.LH: (Quadrant.HL, Quadrant.LL, Quadrant.LH, Quadrant.HH),
        Quadrant.LL: (Quadrant.HH, Quadrant.LH, Quadrant.LL, Quadrant.HL),
    }
    local_first = (Quadrant.HH, Quadrant.LH, Quadrant.HL, Quadrant.LL)
    rng = random.Random(rng_seed)
    chosen, contribs, used = [], [], set()

    def first_hint(s, order):
        for q in order:
            if s.quadrant_count(q) > 0:
                return q
        return None

    def ok():
        return len(chosen) >= req.min_replicas and reliability_satisfied(
            req.target_reliability, contribs
        )

    if req.client_is_edge and req.client_fog in summaries:
        s = summaries[req.client_fog]
        if s.s_max >= req.block_size:
            h = first_hint(s, local_first)
            if h is not None:
                chosen.append((req.client_fog, h))
                contribs.append(contribution_of(s, h))
                used.add(req.client_fog)
    step = 0
    reuse = False
    while not ok() and len(chosen) < req.max_replicas:
        order = (
            [Quadrant.HH, Quadrant.HL] if step % 2 == 0 else [Quadrant.HL, Quadrant.HH]
        ) + [Quadrant.LH, Quadrant.LL]
        step += 1
        for gq in order:
            cands = sorted(
                f
                for f, s in summaries.items()
                if g.fog_class.get(f) == gq
                and (reuse or f not in used)
                and s.s_max >= req.block_size
                and first_hint(s, hints[gq]) is not None
            )
            if cands:
                f = rng.choice(cands)
                h = first_hint(summaries[f], hints[gq])
                chosen.append((f, h))
                contribs.append(contribution_of(summaries[f], h))
                used.add(f)
                break
        else:
            if not reuse and used:
                reuse = True
                continue
            break
    return chosen, contribs


class TestChooseReplicaFogs:
    def test_d20_analog_replication_factor(self):
        g, summaries, _ = cluster_fixture(31337, 4, 4, 0.90, 0.03)
        for seed in range(200):
            req = ReplicaRequirement(10 * MB, 0.99, 2, 5, client_fog=(seed % 4) + 1, client_is_edge=True)
            plan = choose_replica_fogs(g, summaries, req, rng_seed=seed)
            assert plan.replica_count in (2, 3)
            assert not plan.reliability_unmet

    def test_d272_analog_spans_full_replica_range(self):
        g, summaries, _ = cluster_fixture(99, 16, 16, 0.80, 0.05)
        seen = set()
        targets = [0.90, 0.99, 0.999, 0.9999]
        for seed in range(400):
            req = ReplicaRequirement(
                1 * MB, targets[seed % 4], 2, 5, client_fog=(seed % 16) + 1, client_is_edge=True
            )
            plan = choose_replica_fogs(g, summaries, req, rng_seed=seed)
            seen.add(plan.replica_count)
        assert seen == {2, 3, 4, 5}

    def test_plan_matches_independent_replay(self):
        rng = random.Random(4242)
        for trial in range(1000):
            fogs = rng.randrange(1, 7)
            g, summaries, _ = cluster_fixture(
                rng.randrange(1 << 30), fogs, rng.randrange(1, 4), 0.8, 0.1
            )
            req = ReplicaRequirement(
                1 * MB,
                rng.choice([0.9, 0.99, 0.999]),
                1,
                rng.randrange(2, 6),
                client_fog=rng.randrange(1, fogs + 1),
                client_is_edge=rng.random() < 0.5,
            )
            seed = rng.randrange(1 << 30)
            try:
                plan = choose_replica_fogs(g, summaries, req, rng_seed=seed)
            except InsufficientCapacityError:
                continue
            expected_choices, expected_contribs = replay_plan(g, summaries, req, seed)
            assert plan.choices == expected_choices
            bound = 1.0
            for c in expected_contribs:
                bound *= 1.0 - c
            assert plan.achieved_reliability_bound == pytest.approx(1.0 - bound)

    def test_plan_size_is_prefix_minimal(self):
        # The plan must stop at the first prefix meeting the target (or the
        # min bound), never add a replica beyond it, brute-force checked.
        rng = random.Random(555)
        for trial in range(1000):
            g, summaries, _ = cluster_fixture(rng.randrange(1 << 30), rng.randrange(2, 6), 2, 0.85, 0.08)
            req = ReplicaRequirement(1 * MB, rng.choice([0.9, 0.99, 0.999]), 1, 5)
            try:
                plan = choose_replica_fogs(g, summaries, req, rng_seed=trial)
            except InsufficientCapacityError:
                continue
            contribs = [contribution_of(summaries[f], h) for f, h in plan.choices]
            stop = None
            for t in range(req.min_replicas, req.max_replicas + 1):
                if t <= len(contribs) and reliability_satisfied(
                    req.target_reliability, contribs[:t]
                ):
                    stop = t
                    break
            if plan.reliability_unmet:
                assert stop is None
            else:
                assert plan.replica_count == stop

    def test_two_fog_toy_hand_computation(self):
        a = PartitionSummary(1, 0.80, 0.90, 0.95, 8 * GB, 10 * GB, 12 * GB, 1, 1, 1, 1)
        b = PartitionSummary(2, 0.85, 0.92, 0.97, 2 * GB, 3 * GB, 4 * GB, 1, 1, 1, 1)
        g = build_global_matrix([a, b], k=16)
        req = ReplicaRequirement(1 * MB, 0.99, 1, 4)
        plan = choose_replica_fogs(g, summaries={1: a, 2: b}, req=req, rng_seed=0)
        # Conservative product must match a direct recomputation by hand.
        expected = 1.0
        for fog, hint in plan.choices:
            expected *= 1.0 - contribution_of({1: a, 2: b}[fog], hint)
        assert plan.achieved_reliability_bound == pytest.approx(1.0 - expected)
        assert not plan.reliability_unmet
        assert (1 - 0.99) >= expected

    def test_distinct_fogs_until_forced(self):
        g, summaries, _ = cluster_fixture(7, 4, 4, 0.7, 0.05)
        req = ReplicaRequirement(1 * MB, 0.99999, 2, 8)
        plan = choose_replica_fogs(g, summaries, req, rng_seed=1)
        fog_ids = plan.fog_ids
        if not plan.forced_reuse:
            assert len(fog_ids) == len(set(fog_ids))
        else:
            assert len(set(fog_ids)) == len(summaries)

    def test_first_replica_local_for_edge_clients(self):
        g, summaries, _ = cluster_fixture(11, 4, 4, 0.9, 0.03)
        req = ReplicaRequirement(1 * MB, 0.99, 2, 5, client_fog=3, client_is_edge=True)
        plan = choose_replica_fogs(g, summaries, req, rng_seed=5)
        assert plan.choices[0][0] == 3

    def test_non_edge_client_has_no_local_preference(self):
        g, summaries, _ = cluster_fixture(11, 4, 4, 0.9, 0.03)
        req = ReplicaRequirement(1 * MB, 0.99, 2, 5, client_fog=3, client_is_edge=False)
        plans = {
            choose_replica_fogs(g, summaries, req, rng_seed=s).choices[0][0]
            for s in range(40)
        }
        assert plans != {3}

    def test_determinism_under_fixed_seed(self):
        g, summaries, _ = cluster_fixture(23, 8, 4, 0.85, 0.05)
        req = ReplicaRequirement(5 * MB, 0.999, 2, 5, client_fog=1, client_is_edge=True)
        a = choose_replica_fogs(g, summaries, req, rng_seed=888)
        b = choose_replica_fogs(g, summaries, req, rng_seed=888)
        assert a.choices == b.choices

    def test_insufficient_capacity(self):
        s = PartitionSummary(1, 0.9, 0.9, 0.9, 1 * MB, 1 * MB, 1 * MB, 1, 0, 0, 0)
        g = build_global_matrix([s], k=16)
        req = ReplicaRequirement(10 * MB, 0.9, 1, 3)
        with pytest.raises(InsufficientCapacityError):
            choose_replica_fogs(g, {1: s}, req, rng_seed=0)

    def test_reliability_unmet_flag_at_max_replicas(self):
        s1 = PartitionSummary(1, 0.5, 0.5, 0.5, 16 * GB, 16 * GB, 16 * GB, 1, 0, 0, 0)
        s2 = PartitionSummary(2, 0.5, 0.5, 0.5, 16 * GB, 16 * GB, 16 * GB, 1, 0, 0, 0)
        g = build_global_matrix([s1, s2], k=16)
        req = ReplicaRequirement(1 * MB, 0.9999, 1, 2)
        plan = choose_replica_fogs(g, {1: s1, 2: s2}, req, rng_seed=0)
        assert plan.reliability_unmet
        assert plan.replica_count == 2
        assert plan.warnings

    def test_conservative_bound_holds_for_chosen_edges(self):
        # The edge each fog would actually pick is at least as reliable as
        # the plan's conservative contribution for that fog.
        g, summaries, stats = cluster_fixture(101, 6, 5, 0.85, 0.06)
        for seed in range(100):
            req = ReplicaRequirement(1 * MB, 0.999, 2, 5)
            plan = choose_replica_fogs(g, summaries, req, rng_seed=seed)
            for fog, hint in plan.choices:
                edge_id = choose_edge_in_fog(stats[fog], summaries[fog], hint, 1 * MB)
                edge = next(e for e in stats[fog] if e.edge_id == edge_id)
                assert edge.reliability >= contribution_of(summaries[fog], hint) - 1e-12


class TestChooseEdgeInFog:
    def make(self, rels_and_storage):
        stats = [
            EdgeStat(f"e{i}", r, s) for i, (r, s) in enumerate(rels_and_storage)
        ]
        return stats, summarize_partition(1, stats)

    def test_min_reliability_in_hinted_quadrant(self):
        stats, summary = self.make(
            [(0.85, 16 * GB), (0.88, 16 * GB), (0.92, 1 * GB), (0.95, 1 * GB)]
        )
        # e0 and e1 fall in HL (high storage, low reliability).
        assert edge_quadrant(stats[0], summary) == Quadrant.HL
        assert choose_edge_in_fog(stats, summary, Quadrant.HL, 1 * MB) == "e0"

    def test_expands_when_hint_quadrant_has_no_space(self):
        stats, summary = self.make(
            [(0.85, 2 * MB), (0.88, 2 * MB), (0.92, 16 * GB), (0.95, 16 * GB)]
        )
        chosen = choose_edge_in_fog(stats, summary, Quadrant.HL, 8 * MB)
        assert chosen == "e2"  # least reliable edge that still fits

    def test_ties_break_on_edge_id(self):
        stats = [EdgeStat("e9", 0.9, 16 * GB), EdgeStat("e1", 0.9, 16 * GB)]
        summary = summarize_partition(1, stats)
        assert choose_edge_in_fog(stats, summary, Quadrant.HH, 1 * MB) == "e1"

    def test_no_space_raises(self):
        stats, summary = self.make([(0.9, 1 * MB)])
        with pytest.raises(NoCapacityError):
            choose_edge_in_fog(stats, summary, Quadrant.HH, 2 * MB)

    def test_matches_linear_scan_oracle(self):
        rng = random.Random(2718)
        for _ in range(200):
            stats, summary = self.make(
                [
                    (round(rng.uniform(0.5, 0.999), 3), rng.randrange(1, 32) * GB)
                    for _ in range(16)
                ]
            )
            hint = rng.choice(list(Quadrant))
            size = rng.randrange(1, 40) * GB // 2
            fitting = [e for e in stats if e.free_storage >= size]
            if not fitting:
                with pytest.raises(NoCapacityError):
                    choose_edge_in_fog(stats, summary, hint, size)
                continue
            hinted = [e for e in fitting if edge_quadrant(e, summary) == hint]
            expected = min(hinted or fitting, key=lambda e: (e.reliability, e.edge_id))
            assert choose_edge_in_fog(stats, summary, hint, size) == expected.edge_id


class TestChooseRecoveryFog:
    def test_nearest_contribution_wins(self):
        summaries = {
            1: PartitionSummary(1, 0.80, 0.80, 0.80, 16 * GB, 16 * GB, 16 * GB, 1, 0, 0, 0),
            2: PartitionSummary(2, 0.86, 0.86, 0.86, 16 * GB, 16 * GB, 16 * GB, 1, 0, 0, 0),
            3: PartitionSummary(3, 0.95, 0.95, 0.95, 16 * GB, 16 * GB, 16 * GB, 1, 0, 0, 0),
        }
        g = build_global_matrix(list(summaries.values()), k=16)
        fog, _hint = choose_recovery_fog(g, summaries, 0.85, 1 * MB, exclude=set())
        assert fog == 2

    def test_exclusion_leaves_single_candidate(self):
        summaries = {
            i: PartitionSummary(i, 0.8, 0.85, 0.9, 16 * GB, 16 * GB, 16 * GB, 1, 1, 1, 1)
            for i in range(1, 5)
        }
        g = build_global_matrix(list(summaries.values()), k=16)
        fog, _hint = choose_recovery_fog(g, summaries, 0.85, 1 * MB, exclude={1, 2, 4})
        assert fog == 3

    def test_no_candidate_raises(self):
        summaries = {
            1: PartitionSummary(1, 0.8, 0.85, 0.9, 16 * GB, 16 * GB, 16 * GB, 1, 1, 1, 1)
        }
        g = build_global_matrix(list(summaries.values()), k=16)
        with pytest.raises(InsufficientCapacityError):
            choose_recovery_fog(g, summaries, 0.85, 1 * MB, exclude={1})

    def test_matches_linear_scan_oracle(self):
        rng = random.Random(31)
        for _ in range(200):
            summaries = {}
            for fid in range(1, rng.randrange(2, 8)):
                edges = [
                    EdgeStat(f"e{fid}.{i}", rng.uniform(0.5, 0.999), rng.randrange(1, 32) * GB)
                    for i in range(rng.randrange(1, 6))
                ]
                summaries[fid] = summarize_partition(fid, edges)
            g = build_global_matrix(list(summaries.values()), k=16)
            failed_r = rng.uniform(0.5, 0.999)
            size = rng.randrange(1, 16) * GB
            exclude = {f for f in summaries if rng.random() < 0.3}
            candidates = []
            for fid in sorted(summaries):
                s = summaries[fid]
                if fid in exclude or s.s_max < size:
                    continue
                for qi, q in enumerate(Quadrant):
                    if s.quadrant_count(q) > 0:
                        candidates.append(
                            (abs(contribution_of(s, q) - failed_r), fid, qi, q)
                        )
            if not candidates:
                with pytest.raises(InsufficientCapacityError):
                    choose_recovery_fog(g, summaries, failed_r, size, exclude)
                continue
            best = min(candidates)
            assert choose_recovery_fog(g, summaries, failed_r, size, exclude) == (
                best[1],
                best[3],
            )
