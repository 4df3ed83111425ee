"""Bloom filter, partition index, and search planning behavior."""

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elfstore.bloom import (
    FILTER_BITS,
    FilterSet,
    HASH_COUNT,
    PartitionIndex,
    PropertyBloomFilter,
    canonical_value,
    hash_value,
    index_block,
    merge_filters,
    split_block_ref,
)
from elfstore.errors import InvalidMergeError

# Golden positions for SHA-1(""): leading 16-bit words da39 a3ee 5e6b 4b0d
# 3255, each mod 160.
EMPTY_STRING_POSITIONS = {25, 46, 11, 13, 85}


def bits_of(mask: int) -> set[int]:
    return {i for i in range(FILTER_BITS) if mask >> i & 1}


class TestHashValue:
    def test_empty_string_golden(self):
        assert bits_of(hash_value("")) == EMPTY_STRING_POSITIONS

    def test_stable_across_calls(self):
        assert hash_value("sensor-7") == hash_value("sensor-7")

    @given(st.text(max_size=64))
    def test_popcount_bounds(self, v):
        assert 1 <= bin(hash_value(v)).count("1") <= HASH_COUNT

    def test_distinct_values_rarely_collide(self):
        rng = random.Random(42)
        masks = {hash_value(f"v{rng.getrandbits(48)}") for _ in range(20_000)}
        # Full-mask collisions are possible but must stay very rare.
        assert len(masks) >= 19_980

    def test_canonical_value_forms(self):
        assert canonical_value("x") == "x"
        assert canonical_value(3) == "3"
        assert canonical_value(0.1) == "0.1"
        assert canonical_value(True) == "true"


class TestPropertyBloomFilter:
    def test_single_insert_sets_exact_mask(self):
        f = PropertyBloomFilter("sensor")
        f.insert("temp")
        assert f.bits == hash_value("temp")
        assert f.insert_count == 1

    def test_insert_idempotent_bits(self):
        f, g = PropertyBloomFilter("a"), PropertyBloomFilter("a")
        f.insert("v")
        f.insert("v")
        g.insert("v")
        assert f.bits == g.bits

    def test_or_fold_oracle(self):
        rng = random.Random(7)
        values = [f"val-{rng.getrandbits(32)}" for _ in range(100)]
        f = PropertyBloomFilter("p")
        expected = 0
        for v in values:
            f.insert(v)
            expected |= hash_value(v)
        assert f.bits == expected

    def test_empty_filter_contains_nothing(self):
        f = PropertyBloomFilter("p")
        assert not f.may_contain("anything")

    def test_no_false_negatives(self):
        f = PropertyBloomFilter("p")
        rng = random.Random(11)
        inserted = [f"k{rng.getrandbits(40)}" for _ in range(500)]
        for v in inserted:
            f.insert(v)
        assert all(f.may_contain(v) for v in inserted)

    @given(st.lists(st.text(min_size=1, max_size=12), max_size=40), st.text(max_size=12))
    @settings(max_examples=60)
    def test_monotone_under_inserts(self, values, probe):
        f = PropertyBloomFilter("p")
        was_present = False
        for v in values:
            f.insert(v)
            present = f.may_contain(probe)
            assert present or not was_present  # true never flips back to false
            was_present = present

    def test_false_positive_rate_near_theory(self):
        # (1 - e^{-kn/m})^k for k=5, n=50, m=160; measured within factor 2.
        rng = random.Random(1234)
        f = PropertyBloomFilter("p")
        inserted = {f"in{rng.getrandbits(48)}" for _ in range(50)}
        for v in inserted:
            f.insert(v)
        probes = 10_000
        hits = sum(
            1 for i in range(probes) if f.may_contain(f"out-{i}-{rng.getrandbits(32)}")
        )
        measured = hits / probes
        theory = (1 - math.exp(-HASH_COUNT * 50 / FILTER_BITS)) ** HASH_COUNT
        assert theory / 2 <= measured <= theory * 2

    def test_round_trip_bytes(self):
        f = PropertyBloomFilter("p")
        f.insert("abc")
        g = PropertyBloomFilter.from_bytes("p", f.to_bytes())
        assert g.bits == f.bits
        assert len(f.to_bytes()) == 20


class TestMerge:
    def test_merge_empties(self):
        e = PropertyBloomFilter("p")
        assert merge_filters(e, [PropertyBloomFilter("p"), PropertyBloomFilter("p")]).bits == 0

    def test_merge_identity(self):
        f = PropertyBloomFilter("p")
        f.insert("x")
        assert merge_filters(f, []).bits == f.bits

    def test_merge_preserves_membership(self):
        rng = random.Random(3)
        locals_ = [PropertyBloomFilter("p") for _ in range(4)]
        values = []
        for f in locals_:
            for _ in range(25):
                v = f"v{rng.getrandbits(40)}"
                f.insert(v)
                values.append(v)
        merged = merge_filters(locals_[0], locals_[1:])
        assert all(merged.may_contain(v) for v in values)

    def test_mismatched_property_rejected(self):
        with pytest.raises(InvalidMergeError):
            merge_filters(PropertyBloomFilter("a"), [PropertyBloomFilter("b")])

    @given(st.lists(st.integers(min_value=0, max_value=2**FILTER_BITS - 1), min_size=2, max_size=5))
    @settings(max_examples=50)
    def test_or_semilattice(self, bit_patterns):
        filters = [PropertyBloomFilter("p", bits=b) for b in bit_patterns]
        a = merge_filters(filters[0], filters[1:])
        b = merge_filters(filters[-1], list(reversed(filters[:-1])))
        assert a.bits == b.bits  # commutative + associative
        again = merge_filters(a, [a])
        assert again.bits == a.bits  # idempotent


class TestPartitionIndex:
    def test_direct_readback(self):
        idx = PartitionIndex()
        idx.index_block("e1", ("s1", "b1"), [("sensor", "temp")])
        assert idx.lookup([("sensor", "temp")]) == {("e1", "s1/b1")}

    def test_set_semantics(self):
        idx = PartitionIndex()
        for _ in range(2):
            idx.index_block("e1", ("s1", "b1"), [("sensor", "temp")])
        assert len(idx.lookup([("sensor", "temp")])) == 1

    def test_unknown_property_is_empty_not_error(self):
        assert PartitionIndex().lookup([("nope", "x")]) == set()

    def test_empty_query_matches_nothing(self):
        idx = PartitionIndex()
        idx.index_block("e1", ("s1", "b1"), [("a", "v")])
        assert idx.lookup([]) == set()

    def test_conjunctive_lookup_equals_linear_scan(self):
        rng = random.Random(99)
        idx = PartitionIndex()
        blocks = []
        for i in range(1000):
            props = [
                ("city", rng.choice(["blr", "del", "bom"])),
                ("kind", rng.choice(["temp", "co2", "cam"])),
            ]
            edge = f"e{rng.randrange(8)}"
            idx.index_block(edge, ("s", f"b{i}"), props)
            blocks.append((edge, f"s/b{i}", dict(props)))
        for city in ["blr", "del", "bom"]:
            for kind in ["temp", "co2", "cam"]:
                query = [("city", city), ("kind", kind)]
                brute = {
                    (e, ref)
                    for e, ref, props in blocks
                    if props["city"] == city and props["kind"] == kind
                }
                assert idx.lookup(query) == brute

    def test_exhaustive_readback(self):
        rng = random.Random(5)
        idx = PartitionIndex()
        pairs = []
        for i in range(1000):
            value = f"v{rng.randrange(200)}"
            idx.index_block(f"e{i % 4}", ("s", f"b{i}"), [("tag", value)])
            pairs.append((value, (f"e{i % 4}", f"s/b{i}")))
        for value, ref in pairs:
            assert ref in idx.lookup([("tag", value)])

    def test_remove_edge_drops_all_entries(self):
        idx = PartitionIndex()
        idx.index_block("e1", ("s", "b1"), [("a", "x")])
        idx.index_block("e2", ("s", "b2"), [("a", "x")])
        idx.remove_edge("e1")
        assert idx.lookup([("a", "x")]) == {("e2", "s/b2")}
        assert idx.block_pairs() == {("e2", "s/b2")}

    def test_stream_entries(self):
        idx = PartitionIndex()
        idx.index_stream("s1", [("city", "blr"), ("streamId", "s1")])
        assert idx.lookup_streams([("city", "blr")]) == {"s1"}
        assert idx.lookup_streams([("city", "blr"), ("streamId", "s2")]) == set()

    def test_split_block_ref(self):
        assert split_block_ref("s1/b9") == ("s1", "b9")


class TestSearchPlanning:
    def test_all_empty(self):
        plan = FilterSet().plan_search([("a", "v")])
        assert (plan.local_hit, plan.candidate_neighbors, plan.candidate_buddies) == (
            False,
            set(),
            set(),
        )

    def test_value_at_neighbor_always_listed(self):
        fs = FilterSet()
        remote = PropertyBloomFilter("a")
        remote.insert("v")
        fs.set_neighbor_filters(3, {"a": remote})
        fs.set_neighbor_filters(4, {"a": PropertyBloomFilter("a")})
        plan = fs.plan_search([("a", "v")])
        assert 3 in plan.candidate_neighbors

    def test_index_block_updates_local_filters(self):
        fs = FilterSet()
        idx = PartitionIndex()
        index_block(idx, fs, "e1", ("s1", "b1"), [("sensor", "temp")])
        assert fs.plan_search([("sensor", "temp")]).local_hit
        assert idx.lookup([("sensor", "temp")]) == {("e1", "s1/b1")}

    def test_no_false_negatives_through_hierarchy(self):
        # Ground-truth placement of 500 values across 12 fogs; the owning
        # fog must always be reachable through some candidate tier.
        from elfstore.overlay import build_overlay

        topo = build_overlay(list(range(1, 13)), b=2)
        rng = random.Random(17)
        locals_ = {fid: FilterSet() for fid in topo.fogs}
        placements = {}
        for i in range(500):
            fog = rng.choice(sorted(topo.fogs))
            value = f"val{i}"
            locals_[fog].insert_local("tag", value)
            placements[value] = fog

        # Wire up tier views the way dissemination would.
        views = {}
        for fid in topo.fogs:
            fs = FilterSet()
            fs.local = locals_[fid].local
            pool = [m for m in topo.pool_members(fid) if m != fid]
            for m in pool:
                fs.set_neighbor_filters(m, locals_[m].local)
            own_pool_buddy = topo.pool_buddy_of(fid)
            for buddy in topo.buddy_set:
                if buddy == own_pool_buddy:
                    continue
                members = topo.pool_members(buddy)
                merged: dict[str, PropertyBloomFilter] = {}
                for m in members:
                    for name, f in locals_[m].local.items():
                        merged[name] = (
                            merge_filters(merged[name], [f]) if name in merged else f.copy()
                        )
                fs.set_buddy_filters(buddy, merged)
            views[fid] = fs

        for value, owner in placements.items():
            for fid, fs in views.items():
                plan = fs.plan_search([("tag", value)])
                if owner == fid:
                    assert plan.local_hit
                elif owner in topo.pool_members(fid):
                    assert owner in plan.candidate_neighbors
                else:
                    assert topo.pool_buddy_of(owner) in plan.candidate_buddies
