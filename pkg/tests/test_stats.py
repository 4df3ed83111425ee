"""Partition summaries and global matrix estimation.

The four-fog scenario used throughout encodes the worked bucket example:
fog B spans storage (9, 12, 14) with 9 low-side and 6 high-side edges, the
global ranges come out as reliability [70, 94] and storage [4, 20] (so 16
buckets of width 1.5 and 1.0), and the derived global medians are 85 and
12. Fog tuples other than the quoted ones are chosen to be consistent with
those outcomes: A low/low, C high-storage low-reliability with its
high-reliability half straddling the global median 1:3, D high-reliability.
"""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elfstore.errors import InvalidConfigError, NoEdgesError
from elfstore.stats import (
    EdgeStat,
    PartitionSummary,
    Quadrant,
    build_global_matrix,
    classify_fog,
    lower_median,
    summarize_partition,
)

GB = 1_000_000_000


def four_fog_scenario() -> list[PartitionSummary]:
    return [
        PartitionSummary(1, 70, 75, 83, 4, 6, 8, 2, 4, 3, 4),    # A
        PartitionSummary(2, 79, 85, 91, 9, 12, 14, 3, 5, 4, 3),  # B
        PartitionSummary(3, 76, 82, 94, 12, 16, 20, 6, 6, 2, 2),  # C
        PartitionSummary(4, 84, 88, 92, 10, 12, 14, 4, 4, 2, 2),  # D
    ]


class TestSummarize:
    def test_single_edge(self):
        s = summarize_partition(1, [EdgeStat("e1", 0.9, 10 * GB)])
        assert (s.r_min, s.r_med, s.r_max) == (0.9, 0.9, 0.9)
        assert (s.s_min, s.s_med, s.s_max) == (10 * GB, 10 * GB, 10 * GB)
        assert (s.c_q1, s.c_q2, s.c_q3, s.c_q4) == (1, 0, 0, 0)

    def test_four_distinct_edges_brute_force(self):
        edges = [
            EdgeStat("e1", 0.80, 1 * GB),
            EdgeStat("e2", 0.85, 4 * GB),
            EdgeStat("e3", 0.90, 2 * GB),
            EdgeStat("e4", 0.95, 3 * GB),
        ]
        s = summarize_partition(7, edges)
        assert s.r_med == 0.85  # lower median
        assert s.s_med == 2 * GB
        # Exhaustive per-edge classification against the medians.
        q = {Quadrant.HH: 0, Quadrant.LH: 0, Quadrant.LL: 0, Quadrant.HL: 0}
        for e in edges:
            key = ("H" if e.free_storage >= s.s_med else "L") + (
                "H" if e.reliability >= s.r_med else "L"
            )
            q[Quadrant(key)] += 1
        assert (s.c_q1, s.c_q2, s.c_q3, s.c_q4) == (
            q[Quadrant.HH],
            q[Quadrant.LH],
            q[Quadrant.LL],
            q[Quadrant.HL],
        )

    def test_near_balance_within_rounding(self):
        # With distinct values the >=-median split leaves at most 2 extra on
        # the high side (ties at the median would legitimately skew further).
        rng = random.Random(21)
        for trial in range(200):
            n = rng.randrange(1, 30)
            edges = [
                EdgeStat(f"e{i}", rng.uniform(0.5, 0.999), rng.randrange(1 * GB, 64 * GB))
                for i in range(n)
            ]
            s = summarize_partition(trial, edges)
            assert abs((s.c_q1 + s.c_q2) - (s.c_q3 + s.c_q4)) <= 2
            assert abs((s.c_q1 + s.c_q4) - (s.c_q2 + s.c_q3)) <= 2
            assert s.edge_total == n

    def test_empty_partition_rejected(self):
        with pytest.raises(NoEdgesError):
            summarize_partition(1, [])

    def test_lower_median(self):
        assert lower_median([3.0, 1.0, 2.0]) == 2.0
        assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0


class TestGlobalMatrix:
    def test_four_fog_medians(self):
        g = build_global_matrix(four_fog_scenario(), k=16)
        # Bucket widths: reliability (94-70)/16 = 1.5, storage (20-4)/16 = 1.
        assert g.r_bucket_width == pytest.approx(1.5)
        assert g.s_bucket_width == pytest.approx(1.0)
        assert g.r_med == pytest.approx(85.0, abs=g.r_bucket_width)
        assert g.s_med == pytest.approx(12.0, abs=g.s_bucket_width)

    def test_four_fog_classification(self):
        summaries = four_fog_scenario()
        g = build_global_matrix(summaries, k=16)
        assert g.fog_class[1] == Quadrant.LL  # fog A
        assert g.fog_class[3] == Quadrant.HL  # fog C
        assert classify_fog(summaries[0], g) == Quadrant.LL
        assert classify_fog(summaries[2], g) == Quadrant.HL

    def test_fog_c_low_reliability_mass_fully_in_hl(self):
        g = build_global_matrix(four_fog_scenario(), k=16)
        overlap = g.per_fog_overlap[3]
        # q3 + q4 (4 edges, reliability below 85, storage above 12) all in HL;
        # the q1+q2 mass splits 1:3 between HL and HH.
        assert overlap[Quadrant.HL] == pytest.approx(4 + 3, rel=0.05)
        assert overlap[Quadrant.HH] == pytest.approx(9, rel=0.05)
        q12_to_hl = overlap[Quadrant.HL] - 4
        assert q12_to_hl / overlap[Quadrant.HH] == pytest.approx(1 / 3, rel=0.05)

    def test_count_conservation(self):
        g = build_global_matrix(four_fog_scenario(), k=16)
        assert g.total_edges == pytest.approx(56, abs=1e-6)

    def test_single_fog_reproduces_own_medians(self):
        s = PartitionSummary(5, 0.8, 0.9, 1.0, 4, 8, 12, 1, 1, 1, 1)
        g = build_global_matrix([s], k=16)
        assert g.r_med == pytest.approx(0.9)
        assert g.s_med == pytest.approx(8)
        assert g.fog_class[5] == Quadrant.HH  # its own center, ties go high

    def test_center_equal_to_global_center_is_hh(self):
        summaries = four_fog_scenario()
        g = build_global_matrix(summaries, k=16)
        centered = PartitionSummary(9, 80, g.r_med, 90, 10, g.s_med, 14, 1, 1, 1, 1)
        assert classify_fog(centered, g) == Quadrant.HH

    def test_order_independence(self):
        summaries = four_fog_scenario()
        a = build_global_matrix(summaries, k=16)
        b = build_global_matrix(list(reversed(summaries)), k=16)
        assert a == b

    def test_k_validation(self):
        with pytest.raises(InvalidConfigError):
            build_global_matrix(four_fog_scenario(), k=1)
        with pytest.raises(NoEdgesError):
            build_global_matrix([], k=16)

    def test_degenerate_zero_width_range(self):
        s = PartitionSummary(1, 0.9, 0.9, 0.9, 10, 10, 10, 2, 0, 0, 0)
        g = build_global_matrix([s], k=16)
        assert g.r_med == pytest.approx(0.9)
        assert g.s_med == pytest.approx(10)
        assert g.total_edges == pytest.approx(2, abs=1e-9)

    def test_count_conservation_random_populations(self):
        rng = random.Random(1001)
        for trial in range(1000):
            fog_count = rng.randrange(1, 9)
            summaries = []
            total = 0
            for fid in range(fog_count):
                n = rng.randrange(1, 12)
                edges = [
                    EdgeStat(f"e{fid}.{i}", rng.uniform(0.5, 0.999), rng.randrange(1, 64) * GB)
                    for i in range(n)
                ]
                summaries.append(summarize_partition(fid, edges))
                total += n
            g = build_global_matrix(summaries, k=16)
            assert g.total_edges == pytest.approx(total, abs=total * 1e-6)

    def test_interpolated_median_near_exact_median(self):
        # Oracle: the per-edge global median, visible only to the test. The
        # uniform-spread approximation needs populations with many more
        # edges than buckets for the one-bucket-width claim to be
        # meaningful, so partitions here are reasonably sized.
        rng = random.Random(2024)
        for _ in range(50):
            all_rel, all_sto, summaries = [], [], []
            for fid in range(rng.randrange(4, 11)):
                edges = [
                    EdgeStat(f"e{fid}.{i}", rng.uniform(0.5, 0.999), rng.randrange(1 * GB, 64 * GB))
                    for i in range(rng.randrange(16, 41))
                ]
                summaries.append(summarize_partition(fid, edges))
                all_rel.extend(e.reliability for e in edges)
                all_sto.extend(e.free_storage for e in edges)
            g = build_global_matrix(summaries, k=16)
            assert abs(g.r_med - lower_median(all_rel)) <= g.r_bucket_width
            assert abs(g.s_med - lower_median(all_sto)) <= g.s_bucket_width

    def test_monotone_in_added_high_storage_summary(self):
        base = four_fog_scenario()
        g0 = build_global_matrix(base, k=16)
        high = PartitionSummary(9, 80, 85, 90, 30, 40, 50, 2, 2, 2, 2)
        g1 = build_global_matrix(base + [high], k=16)
        assert g1.s_med >= g0.s_med

    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0.5, max_value=0.999),
                st.integers(min_value=1, max_value=64),
            ),
            min_size=1,
            max_size=20,
        )
    )
    @settings(max_examples=60)
    def test_classification_matches_direct_comparison(self, raw):
        edges = [EdgeStat(f"e{i}", r, s * GB) for i, (r, s) in enumerate(raw)]
        summary = summarize_partition(0, edges)
        g = build_global_matrix([summary], k=8)
        q = classify_fog(summary, g)
        assert q.high_reliability == (summary.r_med >= g.r_med)
        assert q.high_storage == (summary.s_med >= g.s_med)
