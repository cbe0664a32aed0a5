"""Open-loop planning metrics: displacement, collision, road departure.

All trajectories live in the ego frame at prediction time. Batch scores
are reported per horizon (1, 2, 3 s) plus their arithmetic mean; the mean
is always recomputed from the three horizon values, never stored
independently, so the averaging identity holds by construction.

The collision test places the configured ego footprint at each predicted
waypoint (heading from finite differences of the waypoint chain, origin
prepended) and runs a separating-axis overlap test against every annotated
object box at the nearest ground-truth snapshot. The road-departure test
("intersection rate" in the reports; the drivable-area-violation reading,
flagged as such) counts samples whose waypoints leave every drivable
polygon, using even-odd point-in-polygon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateGeometryError, EmptyBatchError,
                     GridMismatchError)
from .scene_store import LaneGraph

HORIZONS = (1.0, 2.0, 3.0)
DEFAULT_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
DEFAULT_EGO_DIMS = (4.6, 1.9)  # length x width, meters
FRAME_MATCH_TOL_S = 0.25
_T_EPS = 1e-9


@dataclass(frozen=True)
class PlanPrediction:
    """Waypoints of one sample on a fixed horizon grid."""

    sample_id: str
    times: tuple[float, ...]
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.times) != len(self.points):
            raise GridMismatchError(
                f"sample {self.sample_id!r}: {len(self.times)} times vs "
                f"{len(self.points)} points")
        if any(not (math.isfinite(x) and math.isfinite(y))
               for x, y in self.points):
            raise GridMismatchError(
                f"sample {self.sample_id!r}: non-finite waypoint")

    @staticmethod
    def from_waypoints(sample_id: str, waypoints) -> "PlanPrediction":
        """Build from [t, x, y] rows, sorted by t."""
        rows = sorted((float(t), float(x), float(y)) for t, x, y in waypoints)
        return PlanPrediction(sample_id,
                              tuple(r[0] for r in rows),
                              tuple((r[1], r[2]) for r in rows))

    def at(self, t: float) -> tuple[float, float]:
        for tt, p in zip(self.times, self.points):
            if abs(tt - t) <= _T_EPS:
                return p
        raise GridMismatchError(
            f"sample {self.sample_id!r} has no waypoint at t={t}")


@dataclass(frozen=True)
class OrientedBox2D:
    center: tuple[float, float]
    half_extents: tuple[float, float]
    yaw: float

    def __post_init__(self):
        if self.half_extents[0] <= 0 or self.half_extents[1] <= 0:
            raise DegenerateGeometryError("half_extents must be > 0")

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hx, hy = self.half_extents
        rot = np.array([[c, -s], [s, c]])
        local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
        return local @ rot.T + np.asarray(self.center)


@dataclass(frozen=True)
class ObjectSnapshot:
    """Object boxes annotated at one ground-truth timestamp."""

    t: float
    boxes: tuple[OrientedBox2D, ...]


@dataclass(frozen=True)
class HorizonValues:
    """Per-horizon values; avg is always the arithmetic mean of the three."""

    h1: float
    h2: float
    h3: float

    @property
    def avg(self) -> float:
        return (self.h1 + self.h2 + self.h3) / 3.0

    def as_dict(self) -> dict:
        return {"1s": self.h1, "2s": self.h2, "3s": self.h3, "avg": self.avg}


# ---------------------------------------------------------------------------
# L2 displacement


def _require_shared_grid(pred: PlanPrediction, gt: PlanPrediction) -> None:
    if len(pred.times) != len(gt.times) or any(
            abs(a - b) > _T_EPS for a, b in zip(pred.times, gt.times)):
        raise GridMismatchError(
            f"sample {pred.sample_id!r}: prediction and ground truth grids differ")
    for h in HORIZONS:
        if not any(abs(t - h) <= _T_EPS for t in pred.times):
            raise GridMismatchError(
                f"sample {pred.sample_id!r}: grid missing the {h}s horizon")


def l2_at_horizons(pred: PlanPrediction, gt: PlanPrediction) -> HorizonValues:
    """Euclidean displacement at the 1, 2, and 3 s waypoints."""
    _require_shared_grid(pred, gt)
    values = [math.dist(pred.at(h), gt.at(h)) for h in HORIZONS]
    return HorizonValues(*values)


def l2_batch(preds, gts) -> HorizonValues:
    """Per-horizon mean over samples (order-invariant)."""
    if not preds:
        raise EmptyBatchError("no samples")
    if len(preds) != len(gts):
        raise GridMismatchError("prediction and ground-truth counts differ")
    per = [l2_at_horizons(p, g) for p, g in zip(preds, gts)]
    n = len(per)
    return HorizonValues(sum(v.h1 for v in per) / n,
                         sum(v.h2 for v in per) / n,
                         sum(v.h3 for v in per) / n)


# ---------------------------------------------------------------------------
# Separating-axis overlap


def boxes_overlap(a: OrientedBox2D, b: OrientedBox2D) -> bool:
    """SAT on the four edge normals of the two rectangles.

    Touching boxes count as overlapping (closed intervals).
    """
    ca, cb = a.corners(), b.corners()
    axes = []
    for yaw in (a.yaw, b.yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        axes.append((c, s))
        axes.append((-s, c))
    for ax in axes:
        axis = np.asarray(ax)
        pa = ca @ axis
        pb = cb @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def _headings(points) -> list[float]:
    """Heading per waypoint from finite differences, origin prepended.

    Each waypoint takes the direction of its incoming segment; degenerate
    segments reuse the previous heading.
    """
    chain = [(0.0, 0.0)] + list(points)
    headings = []
    prev = 0.0
    for a, b in zip(chain, chain[1:]):
        dx, dy = b[0] - a[0], b[1] - a[1]
        if math.hypot(dx, dy) > 1e-9:
            prev = math.atan2(dy, dx)
        headings.append(prev)
    return headings


def _nearest_snapshot(snapshots, t: float) -> ObjectSnapshot:
    if not snapshots:
        return ObjectSnapshot(t, ())
    best = min(snapshots, key=lambda s: abs(s.t - t))
    if abs(best.t - t) > FRAME_MATCH_TOL_S:
        raise GridMismatchError(
            f"no ground-truth snapshot within {FRAME_MATCH_TOL_S}s of t={t}")
    return best


def _cumulative_rates(event_times) -> HorizonValues:
    """Percentage of samples whose event time falls within each horizon."""
    n = len(event_times)
    rates = []
    for h in HORIZONS:
        hits = sum(1 for t in event_times if t is not None and t <= h + _T_EPS)
        rates.append(100.0 * hits / n)
    return HorizonValues(*rates)


def collision_rate(preds, snapshots_per_sample,
                   ego_dims=DEFAULT_EGO_DIMS) -> HorizonValues:
    """Percent of samples whose ego footprint hits any object box by each
    horizon. A sample's collision time is the earliest grid time at which
    the footprint, placed at the predicted waypoint with finite-difference
    heading, overlaps an object box from the nearest snapshot."""
    if not preds:
        raise EmptyBatchError("no samples")
    if len(preds) != len(snapshots_per_sample):
        raise GridMismatchError("sample counts differ")
    half = (ego_dims[0] / 2.0, ego_dims[1] / 2.0)
    collision_times = []
    for pred, snapshots in zip(preds, snapshots_per_sample):
        headings = _headings(pred.points)
        hit_t = None
        for t, point, heading in zip(pred.times, pred.points, headings):
            snapshot = _nearest_snapshot(snapshots, t)
            ego_box = OrientedBox2D(point, half, heading)
            if any(boxes_overlap(ego_box, box) for box in snapshot.boxes):
                hit_t = t
                break
        collision_times.append(hit_t)
    return _cumulative_rates(collision_times)


# ---------------------------------------------------------------------------
# Drivable-area containment


def point_in_polygon(point, polygon) -> bool:
    """Even-odd ray casting; polygons with < 3 vertices are degenerate."""
    if len(polygon) < 3:
        raise DegenerateGeometryError(
            f"polygon needs >= 3 vertices, got {len(polygon)}")
    x, y = point
    inside = False
    n = len(polygon)
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < x_cross:
                inside = not inside
    return inside


def intersection_rate(preds, lane_graphs) -> HorizonValues:
    """Percent of samples with any waypoint outside every drivable polygon
    by each horizon ("IR"; drivable-area-violation reading)."""
    if not preds:
        raise EmptyBatchError("no samples")
    if len(preds) != len(lane_graphs):
        raise GridMismatchError("sample counts differ")
    event_times = []
    for pred, lanes in zip(preds, lane_graphs):
        polygons = lanes.drivable_polygons if isinstance(lanes, LaneGraph) \
            else tuple(lanes)
        out_t = None
        for t, point in zip(pred.times, pred.points):
            if not any(point_in_polygon(point, poly) for poly in polygons):
                out_t = t
                break
        event_times.append(out_t)
    return _cumulative_rates(event_times)


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class MetricReport:
    l2: HorizonValues | None = None
    cr: HorizonValues | None = None
    ir: HorizonValues | None = None
    nlg: dict | None = None
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out: dict = {}
        if self.l2 is not None:
            out["L2_m"] = self.l2.as_dict()
        if self.cr is not None:
            out["CR_pct"] = self.cr.as_dict()
        if self.ir is not None:
            out["IR_pct"] = self.ir.as_dict()
        if self.nlg is not None:
            out["nlg"] = dict(sorted(self.nlg.items()))
        if self.notes:
            out["notes"] = list(self.notes)
        return out

    def table(self) -> str:
        """Planning grid, one metric per row, horizons across."""
        rows = [("L2 (m)", self.l2), ("CR (%)", self.cr), ("IR (%)", self.ir)]
        lines = [f"{'Metric':<8} {'1s':>8} {'2s':>8} {'3s':>8} {'Avg':>8}"]
        for name, hv in rows:
            if hv is None:
                continue
            lines.append(f"{name:<8} {hv.h1:>8.2f} {hv.h2:>8.2f} "
                         f"{hv.h3:>8.2f} {hv.avg:>8.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["metric,1s,2s,3s,avg"]
        for name, hv in (("L2_m", self.l2), ("CR_pct", self.cr),
                         ("IR_pct", self.ir)):
            if hv is not None:
                lines.append(f"{name},{hv.h1!r},{hv.h2!r},{hv.h3!r},{hv.avg!r}")
        if self.nlg:
            for key in sorted(self.nlg):
                lines.append(f"{key},{self.nlg[key]!r},,,")
        return "\n".join(lines) + "\n"


def evaluate_plans(preds, gts, snapshots_per_sample=None, lane_graphs=None,
                   ego_dims=DEFAULT_EGO_DIMS) -> MetricReport:
    """Full open-loop report for one batch."""
    report = MetricReport(
        l2=l2_batch(preds, gts),
        cr=(collision_rate(preds, snapshots_per_sample, ego_dims)
            if snapshots_per_sample is not None else None),
        ir=(intersection_rate(preds, lane_graphs)
            if lane_graphs is not None else None),
        notes=("IR counts drivable-area departures (waypoint outside every "
               "drivable polygon).",),
    )
    return report
