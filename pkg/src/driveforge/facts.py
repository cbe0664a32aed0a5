"""Atomic, machine-checkable scene assertions (grounded facts).

Every generated sentence must be traceable to facts, and every fact must
re-derive from the window it was extracted from. Facts therefore carry
provenance (subject object ids, frame id) and only closed-vocabulary or
numeric values.

Spatial vocabulary, pinned here for the whole package:

* position_side from the ego-frame polar angle theta = atan2(y, x), deg:
  front |theta| <= 30; front_left 30 < theta < 90; left 90 <= theta <= 150;
  rear |theta| > 150; mirrored on the negative side.
* distance_band from the 3D center norm: near < 10 m, mid 10..30 m,
  far > 30 m (both boundaries inclusive to mid).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .action_labeler import ActionLabel
from .scene_store import OBJECT_CATEGORIES, FrameRecord, SceneWindow

PREDICATES = ("exists", "count", "position_side", "distance_band",
              "signal_state", "lane_topology", "weather_is", "road_is",
              "action_is")
SIDES = ("front", "front_left", "front_right", "left", "right", "rear")
BANDS = ("near", "mid", "far")
BAND_ORDER = {"near": 0, "mid": 1, "far": 2}

SIGNAL_ATTRIBUTE_KEYS = ("color", "state")


@dataclass(frozen=True)
class FactThresholds:
    near_m: float = 10.0
    far_m: float = 30.0
    front_half_angle_deg: float = 30.0
    side_min_deg: float = 90.0
    rear_min_deg: float = 150.0


DEFAULT_FACT_THRESHOLDS = FactThresholds()


@dataclass(frozen=True)
class GroundedFact:
    fact_id: str
    predicate: str
    subject_ids: tuple[str, ...]
    value: str | int
    frame_id: str


def position_side(x: float, y: float,
                  thresholds: FactThresholds = DEFAULT_FACT_THRESHOLDS) -> str:
    theta = math.degrees(math.atan2(y, x))
    a = abs(theta)
    if a <= thresholds.front_half_angle_deg:
        return "front"
    if a > thresholds.rear_min_deg:
        return "rear"
    if a < thresholds.side_min_deg:
        return "front_left" if theta > 0 else "front_right"
    return "left" if theta > 0 else "right"


def distance_band(distance_m: float,
                  thresholds: FactThresholds = DEFAULT_FACT_THRESHOLDS) -> str:
    if distance_m < thresholds.near_m:
        return "near"
    if distance_m <= thresholds.far_m:
        return "mid"
    return "far"


def object_distance(obj) -> float:
    return math.sqrt(obj.center[0] ** 2 + obj.center[1] ** 2 + obj.center[2] ** 2)


def _signal_value(obj) -> str | None:
    for key in SIGNAL_ATTRIBUTE_KEYS:
        if key in obj.attributes:
            return str(obj.attributes[key]).lower()
    return None


def extract_facts(window: SceneWindow,
                  thresholds: FactThresholds = DEFAULT_FACT_THRESHOLDS
                  ) -> list[GroundedFact]:
    """Deterministic fact list for one window.

    Environment facts (weather, road, lane topology) are emitted once per
    window; object-level facts (exists, position_side, distance_band,
    signal_state) and per-category counts come from the last frame, the
    window's "now". An empty scene still yields the environment facts.
    """
    frame = window.last_frame
    facts: list[GroundedFact] = []
    seq = 0

    def emit(predicate: str, subjects: tuple[str, ...], value,
             qualifier: str = "") -> None:
        nonlocal seq
        suffix = f".{qualifier}" if qualifier else ""
        facts.append(GroundedFact(
            fact_id=f"{frame.frame_id}.{seq:03d}.{predicate}{suffix}",
            predicate=predicate,
            subject_ids=subjects,
            value=value,
            frame_id=frame.frame_id,
        ))
        seq += 1

    emit("weather_is", ("ego",), frame.weather)
    emit("road_is", ("ego",), frame.road_type)
    emit("lane_topology", ("ego",),
         f"same:{frame.lanes.same_direction_lanes},"
         f"opposite:{frame.lanes.opposite_direction_lanes},"
         f"cross:{len(frame.lanes.cross_lanes)}")

    for category in OBJECT_CATEGORIES:
        count = sum(1 for o in frame.objects if o.category == category)
        emit("count", ("ego",), count, qualifier=category)

    for obj in sorted(frame.objects, key=lambda o: o.object_id):
        emit("exists", (obj.object_id,), obj.category, qualifier=obj.object_id)
        emit("position_side", (obj.object_id,),
             position_side(obj.center[0], obj.center[1], thresholds),
             qualifier=obj.object_id)
        emit("distance_band", (obj.object_id,),
             distance_band(object_distance(obj), thresholds),
             qualifier=obj.object_id)
        if obj.category == "traffic_light":
            signal = _signal_value(obj)
            if signal is not None:
                emit("signal_state", (obj.object_id,), signal,
                     qualifier=obj.object_id)

    return facts


def facts_from_label(label: ActionLabel, frame_id: str) -> list[GroundedFact]:
    """Action facts for the ego, one per label axis."""
    axes = (("speed_state", label.speed_state),
            ("longitudinal", label.longitudinal),
            ("maneuver", label.maneuver),
            ("command", label.command))
    return [
        GroundedFact(
            fact_id=f"{frame_id}.9{i:02d}.action_is.{axis}",
            predicate="action_is",
            subject_ids=("ego",),
            value=f"{axis}:{value}",
            frame_id=frame_id,
        )
        for i, (axis, value) in enumerate(axes)
    ]


# ---------------------------------------------------------------------------
# Fact queries (shared by rendering, prompting, and validation)


def facts_with(facts, predicate: str, category: str | None = None):
    """Facts of one predicate, optionally restricted to an object category.

    For object-level predicates the category restriction follows the
    subject's ``exists`` fact; for ``count`` it matches the qualifier in
    the fact id.
    """
    picked = [f for f in facts if f.predicate == predicate]
    if category is None:
        return picked
    if predicate == "count":
        return [f for f in picked if f.fact_id.endswith(f".{category}")]
    if predicate in ("exists",):
        return [f for f in picked if f.value == category]
    subject_categories = {
        f.subject_ids[0]: f.value for f in facts if f.predicate == "exists"}
    return [f for f in picked
            if subject_categories.get(f.subject_ids[0]) == category]


def category_count(facts, category: str) -> int:
    """True object count for a category (0 when no count fact is present)."""
    rows = facts_with(facts, "count", category)
    return int(rows[0].value) if rows else 0


def category_sides(facts, category: str) -> set[str]:
    return {str(f.value) for f in facts_with(facts, "position_side", category)}


def nearest_object_id(facts, category: str) -> str | None:
    """Object id of the category member in the tightest distance band.

    Ties break on object id so the choice is deterministic.
    """
    bands = facts_with(facts, "distance_band", category)
    if not bands:
        return None
    best = min(bands, key=lambda f: (BAND_ORDER[str(f.value)], f.subject_ids[0]))
    return best.subject_ids[0]


def fact_for_subject(facts, predicate: str, subject_id: str):
    for f in facts:
        if f.predicate == predicate and f.subject_ids[0] == subject_id:
            return f
    return None


def signal_states(facts) -> list[GroundedFact]:
    return sorted(facts_with(facts, "signal_state"), key=lambda f: f.fact_id)


def action_value(facts, axis: str) -> str | None:
    prefix = f"{axis}:"
    for f in facts_with(facts, "action_is"):
        if str(f.value).startswith(prefix):
            return str(f.value)[len(prefix):]
    return None
