"""Partition summaries and the shared global distribution matrix.

Each fog condenses its edges' (reliability, free storage) reports into a
10-tuple: min/median/max on both axes plus the edge count in each quadrant
of the local 2-D space. Quadrant letters are (storage, reliability), so
``HL`` means high storage, low reliability:

    q1 = HH   r >= r_med and s >= s_med
    q2 = LH   r >= r_med and s <  s_med
    q3 = LL   r <  r_med and s <  s_med
    q4 = HL   r <  r_med and s >= s_med

From everyone's 10-tuples each fog independently builds the same global
matrix: each summary's counts are spread proportionally-by-width over k
equiwidth buckets of the global range, the bucket histograms are summed and
the global medians interpolated where cumulative mass crosses half the
total. Each local quadrant rectangle is then split against the four global
quadrants by 2-D area overlap (uniform density) to estimate per-quadrant
edge counts, and every fog is classed by where its median-center lands.

All functions are pure and order-independent over their inputs, so every
fog derives an identical matrix from the same summary set.
"""

from dataclasses import dataclass
from enum import Enum

from .errors import InvalidConfigError, NoEdgesError

DEFAULT_BUCKET_COUNT = 16


class Quadrant(str, Enum):
    """(storage, reliability) quadrant labels."""

    HH = "HH"
    HL = "HL"
    LH = "LH"
    LL = "LL"

    @property
    def high_storage(self) -> bool:
        return self.value[0] == "H"

    @property
    def high_reliability(self) -> bool:
        return self.value[1] == "H"


#: Quadrants whose conservative reliability estimate is the fog minimum.
LOW_RELIABILITY_QUADRANTS = (Quadrant.HL, Quadrant.LL)


@dataclass(frozen=True)
class EdgeStat:
    edge_id: str
    reliability: float
    free_storage: int

    def __post_init__(self):
        if not 0.0 <= self.reliability <= 1.0:
            raise InvalidConfigError(f"reliability {self.reliability} outside [0, 1]")
        if self.free_storage < 0:
            raise InvalidConfigError("free_storage must be >= 0")


@dataclass(frozen=True)
class PartitionSummary:
    fog_id: int
    r_min: float
    r_med: float
    r_max: float
    s_min: float
    s_med: float
    s_max: float
    c_q1: float  # HH
    c_q2: float  # LH
    c_q3: float  # LL
    c_q4: float  # HL

    @property
    def edge_total(self) -> float:
        return self.c_q1 + self.c_q2 + self.c_q3 + self.c_q4

    def quadrant_count(self, q: Quadrant) -> float:
        return {
            Quadrant.HH: self.c_q1,
            Quadrant.LH: self.c_q2,
            Quadrant.LL: self.c_q3,
            Quadrant.HL: self.c_q4,
        }[q]

    def to_wire(self) -> dict:
        return {
            "fog_id": self.fog_id,
            "r_min": self.r_min,
            "r_med": self.r_med,
            "r_max": self.r_max,
            "s_min": self.s_min,
            "s_med": self.s_med,
            "s_max": self.s_max,
            "c_q1": self.c_q1,
            "c_q2": self.c_q2,
            "c_q3": self.c_q3,
            "c_q4": self.c_q4,
            "edge_total": self.edge_total,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "PartitionSummary":
        return cls(
            d["fog_id"],
            d["r_min"], d["r_med"], d["r_max"],
            d["s_min"], d["s_med"], d["s_max"],
            d["c_q1"], d["c_q2"], d["c_q3"], d["c_q4"],
        )


def lower_median(values: list[float]) -> float:
    """Median using the lower of the two central order statistics."""
    ordered = sorted(values)
    n = len(ordered)
    return ordered[(n - 1) // 2]


def summarize_partition(fog_id: int, stats: list[EdgeStat]) -> PartitionSummary:
    """Condense one partition's edge reports into its 10-tuple summary."""
    if not stats:
        raise NoEdgesError(f"fog {fog_id} has no edges to summarize")
    rels = [e.reliability for e in stats]
    stores = [float(e.free_storage) for e in stats]
    r_med = lower_median(rels)
    s_med = lower_median(stores)
    q1 = q2 = q3 = q4 = 0
    for e in stats:
        high_r = e.reliability >= r_med
        high_s = e.free_storage >= s_med
        if high_r and high_s:
            q1 += 1
        elif high_r:
            q2 += 1
        elif not high_s:
            q3 += 1
        else:
            q4 += 1
    return PartitionSummary(
        fog_id,
        min(rels), r_med, max(rels),
        min(stores), s_med, max(stores),
        q1, q2, q3, q4,
    )


@dataclass(frozen=True)
class GlobalMatrix:
    r_min: float
    r_med: float
    r_max: float
    s_min: float
    s_med: float
    s_max: float
    quadrant_counts: dict[Quadrant, float]
    fog_class: dict[int, Quadrant]
    per_fog_overlap: dict[int, dict[Quadrant, float]]
    bucket_count: int

    @property
    def r_bucket_width(self) -> float:
        return (self.r_max - self.r_min) / self.bucket_count

    @property
    def s_bucket_width(self) -> float:
        return (self.s_max - self.s_min) / self.bucket_count

    @property
    def total_edges(self) -> float:
        return sum(self.quadrant_counts.values())


def _spread(buckets: list[float], mass: float, lo: float, hi: float, gmin: float, width: float) -> None:
    """Distribute mass over [lo, hi) proportionally to bucket overlap width."""
    if mass <= 0:
        return
    n = len(buckets)
    if width <= 0.0:
        buckets[0] += mass
        return
    if hi <= lo:
        idx = min(int((lo - gmin) / width), n - 1)
        buckets[max(idx, 0)] += mass
        return
    span = hi - lo
    first = max(int((lo - gmin) / width), 0)
    for i in range(first, n):
        b_lo = gmin + i * width
        if b_lo >= hi:
            break
        overlap = min(hi, b_lo + width) - max(lo, b_lo)
        if overlap > 0:
            buckets[i] += mass * overlap / span


def _histogram_median(buckets: list[float], gmin: float, width: float, total: float) -> float:
    """Value where cumulative bucket mass crosses half the total (interpolated)."""
    if width <= 0.0 or total <= 0.0:
        return gmin
    target = total / 2.0
    cum = 0.0
    for i, mass in enumerate(buckets):
        if cum + mass >= target - 1e-12:
            lo = gmin + i * width
            if mass <= 0.0:
                return lo
            return lo + (target - cum) / mass * width
        cum += mass
    return gmin + len(buckets) * width


def _snap_to_endpoint(value: float, triples: list[tuple[float, float, float]], width: float) -> float:
    tolerance = width * 1e-6
    best = value
    best_gap = tolerance
    for triple in triples:
        for endpoint in triple:
            gap = abs(endpoint - value)
            if gap <= best_gap:
                best, best_gap = endpoint, gap
    return best


def _point_quadrant(r: float, s: float, r_med: float, s_med: float) -> Quadrant:
    # Exact equality with a global median resolves to the high side.
    storage = "H" if s >= s_med else "L"
    reliability = "H" if r >= r_med else "L"
    return Quadrant(storage + reliability)


def _high_side_fraction(lo: float, hi: float, med: float) -> float:
    """Fraction of [lo, hi] lying at or above the global median.

    Degenerate intervals behave as point masses with ties going high, so
    single-edge or all-tied summaries still split cleanly.
    """
    if hi <= lo:
        return 1.0 if lo >= med else 0.0
    frac = (hi - med) / (hi - lo)
    return min(max(frac, 0.0), 1.0)


def _quadrant_rects(s: PartitionSummary) -> list[tuple[Quadrant, float, tuple[float, float], tuple[float, float]]]:
    """(quadrant, mass, r-range, s-range) rectangles of a local summary."""
    return [
        (Quadrant.HH, s.c_q1, (s.r_med, s.r_max), (s.s_med, s.s_max)),
        (Quadrant.LH, s.c_q2, (s.r_med, s.r_max), (s.s_min, s.s_med)),
        (Quadrant.LL, s.c_q3, (s.r_min, s.r_med), (s.s_min, s.s_med)),
        (Quadrant.HL, s.c_q4, (s.r_min, s.r_med), (s.s_med, s.s_max)),
    ]


def build_global_matrix(
    summaries: list[PartitionSummary], k: int = DEFAULT_BUCKET_COUNT
) -> GlobalMatrix:
    """Estimate the global reliability/storage distribution from summaries."""
    if not summaries:
        raise NoEdgesError("no summaries to aggregate")
    if k < 2:
        raise InvalidConfigError(f"bucket count k={k} must be >= 2")
    ordered = sorted(summaries, key=lambda s: s.fog_id)

    r_lo = min(s.r_min for s in ordered)
    r_hi = max(s.r_max for s in ordered)
    s_lo = min(s.s_min for s in ordered)
    s_hi = max(s.s_max for s in ordered)
    r_width = (r_hi - r_lo) / k
    s_width = (s_hi - s_lo) / k

    r_buckets = [0.0] * k
    s_buckets = [0.0] * k
    total = 0.0
    for s in ordered:
        total += s.edge_total
        _spread(s_buckets, s.c_q2 + s.c_q3, s.s_min, s.s_med, s_lo, s_width)
        _spread(s_buckets, s.c_q1 + s.c_q4, s.s_med, s.s_max, s_lo, s_width)
        _spread(r_buckets, s.c_q3 + s.c_q4, s.r_min, s.r_med, r_lo, r_width)
        _spread(r_buckets, s.c_q1 + s.c_q2, s.r_med, s.r_max, r_lo, r_width)

    r_med = _histogram_median(r_buckets, r_lo, r_width, total)
    s_med = _histogram_median(s_buckets, s_lo, s_width, total)
    # The crossing often falls exactly on a reported min/med/max value;
    # snap within numerical noise so the ties-go-high rule stays exact.
    r_med = _snap_to_endpoint(r_med, [(s.r_min, s.r_med, s.r_max) for s in ordered], r_width)
    s_med = _snap_to_endpoint(s_med, [(s.s_min, s.s_med, s.s_max) for s in ordered], s_width)

    per_fog: dict[int, dict[Quadrant, float]] = {}
    counts = {q: 0.0 for q in Quadrant}
    for s in ordered:
        overlap = {q: 0.0 for q in Quadrant}
        for _local_q, mass, r_range, s_range in _quadrant_rects(s):
            if mass <= 0:
                continue
            r_high = _high_side_fraction(*r_range, r_med)
            s_high = _high_side_fraction(*s_range, s_med)
            overlap[Quadrant.HH] += mass * s_high * r_high
            overlap[Quadrant.HL] += mass * s_high * (1.0 - r_high)
            overlap[Quadrant.LH] += mass * (1.0 - s_high) * r_high
            overlap[Quadrant.LL] += mass * (1.0 - s_high) * (1.0 - r_high)
        per_fog[s.fog_id] = overlap
        for q in Quadrant:
            counts[q] += overlap[q]

    classes = {
        s.fog_id: _point_quadrant(s.r_med, s.s_med, r_med, s_med) for s in ordered
    }
    return GlobalMatrix(
        r_lo, r_med, r_hi, s_lo, s_med, s_hi, counts, classes, per_fog, k
    )


def classify_fog(summary: PartitionSummary, g: GlobalMatrix) -> Quadrant:
    """Global quadrant containing the fog's median-center; ties go high."""
    return _point_quadrant(summary.r_med, summary.s_med, g.r_med, g.s_med)
