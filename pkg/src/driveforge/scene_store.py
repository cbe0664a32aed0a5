"""Scene ingestion and the ego-centric temporal database.

One JSON document per scene comes in (world-frame annotations); an ordered
sequence of immutable :class:`FrameRecord` objects comes out, with every
object pose expressed in the ego frame of its own timestamp. Downstream
stages never see world coordinates.

Input schema (top level)::

    {
      "scene_id": str,
      "frames": [
        {
          "frame_id": str,
          "timestamp_us": int,
          "ego": {"position": [x, y, z], "rotation": [r00..r22 row-major],
                  "speed": float, "yaw_rate": float},
          "objects": [
            {"object_id": str, "category": str, "center": [x, y, z],
             "size": [l, w, h], "yaw": float, "velocity": [vx, vy],
             "attributes": {str: str}}
          ],
          "lanes": {"same_direction_lanes": int, "opposite_direction_lanes": int,
                    "cross_lanes": [{"direction": str, "polyline": [[x, y]...]}],
                    "drivable_polygons": [[[x, y]...]...], "lane_width": float},
          "weather": str, "road_type": str, "media_refs": [str...]
        }
      ]
    }

``ego.position``/``ego.rotation`` give the ego pose in the world frame
(rotation maps ego-frame vectors into world-frame vectors). Object fields
are world-frame. Unknown keys at the scene and frame level are preserved
in ``extras`` and otherwise ignored.

The serialized database is one JSON line per frame (ego-frame coordinates,
``schema_version`` field); the stored ego pose is the world-to-ego
transform so the original world positions remain recoverable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .errors import GeometryError, OrderError, SchemaError, TooShortError
from .transforms import RigidTransform, wrap_angle

SCHEMA_VERSION = "1"

WEATHER_KINDS = ("clear", "rain", "fog", "snow", "twilight", "night")
ROAD_TYPES = ("city", "rural", "highway", "intersection")
OBJECT_CATEGORIES = ("vehicle", "pedestrian", "cyclist", "traffic_light",
                     "traffic_sign", "other")
CROSS_DIRECTIONS = ("left_to_right", "right_to_left")

_FRAME_KEYS = ("frame_id", "timestamp_us", "ego", "objects", "lanes",
               "weather", "road_type", "media_refs")
_SCENE_KEYS = ("scene_id", "frames")

DEFAULT_WINDOW_LEN = 5
DEFAULT_STRIDE = 2


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class EgoState:
    """Ego pose (world-to-ego transform), speed, yaw rate, and timestamp."""

    pose: RigidTransform
    speed: float
    yaw_rate: float
    timestamp_us: int


@dataclass(frozen=True)
class ObjectAnnotation:
    """One annotated object, ego-frame coordinates."""

    object_id: str
    category: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float]
    attributes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CrossLane:
    direction: str
    polyline: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class LaneGraph:
    same_direction_lanes: int
    opposite_direction_lanes: int
    cross_lanes: tuple[CrossLane, ...]
    drivable_polygons: tuple[tuple[tuple[float, float], ...], ...]
    lane_width: float

    @property
    def total_lanes(self) -> int:
        return self.same_direction_lanes + self.opposite_direction_lanes


@dataclass(frozen=True)
class FrameRecord:
    """One timestamped ego-centric snapshot.

    ``media_refs`` are opaque URIs carried through unopened.
    """

    frame_id: str
    ego: EgoState
    objects: tuple[ObjectAnnotation, ...]
    lanes: LaneGraph
    weather: str
    road_type: str
    media_refs: tuple[str, ...]
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    frames: tuple[FrameRecord, ...]
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SceneWindow:
    """A fixed-length slice of consecutive frames, the MLLM reasoning unit."""

    scene_id: str
    window_index: int
    start: int
    frames: tuple[FrameRecord, ...]
    stride: int

    @property
    def key(self) -> str:
        return f"{self.scene_id}/{self.window_index}"

    @property
    def last_frame(self) -> FrameRecord:
        return self.frames[-1]


@dataclass(frozen=True)
class MinDistances:
    count: int
    min_distance: float | None


# ---------------------------------------------------------------------------
# Schema helpers


def _require(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"expected object, got {type(obj).__name__}", path)
    if key not in obj:
        raise SchemaError("missing required field", f"{path}.{key}" if path else key)
    return obj[key]


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"expected number, got {type(value).__name__}", path)
    v = float(value)
    if not math.isfinite(v):
        raise SchemaError("expected finite number", path)
    return v


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"expected integer, got {type(value).__name__}", path)
    return value


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(f"expected string, got {type(value).__name__}", path)
    return value


def _as_list(value, path: str, length: int | None = None) -> list:
    if not isinstance(value, list):
        raise SchemaError(f"expected array, got {type(value).__name__}", path)
    if length is not None and len(value) != length:
        raise SchemaError(f"expected array of length {length}, got {len(value)}", path)
    return value


def _as_enum(value, allowed: tuple[str, ...], path: str) -> str:
    v = _as_str(value, path)
    if v not in allowed:
        raise SchemaError(f"{v!r} not one of {allowed}", path)
    return v


def _number_tuple(value, path: str, length: int) -> tuple[float, ...]:
    raw = _as_list(value, path, length)
    return tuple(_as_number(x, f"{path}[{i}]") for i, x in enumerate(raw))


def _polygon_area(points: tuple[tuple[float, float], ...]) -> float:
    """Signed shoelace area."""
    acc = 0.0
    n = len(points)
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


# ---------------------------------------------------------------------------
# Ingestion


def _parse_lanes(doc, path: str) -> LaneGraph:
    same = _as_int(_require(doc, "same_direction_lanes", path), f"{path}.same_direction_lanes")
    opposite = _as_int(_require(doc, "opposite_direction_lanes", path),
                       f"{path}.opposite_direction_lanes")
    if same < 0 or opposite < 0:
        raise SchemaError("lane counts must be >= 0", path)
    width = _as_number(_require(doc, "lane_width", path), f"{path}.lane_width")
    if width <= 0:
        raise SchemaError("lane_width must be > 0", f"{path}.lane_width")

    cross = []
    for i, c in enumerate(_as_list(doc.get("cross_lanes", []), f"{path}.cross_lanes")):
        cpath = f"{path}.cross_lanes[{i}]"
        direction = _as_enum(_require(c, "direction", cpath), CROSS_DIRECTIONS,
                             f"{cpath}.direction")
        polyline = tuple(
            tuple(_number_tuple(p, f"{cpath}.polyline[{j}]", 2))
            for j, p in enumerate(_as_list(_require(c, "polyline", cpath),
                                           f"{cpath}.polyline")))
        if len(polyline) < 2:
            raise SchemaError("polyline needs >= 2 points", f"{cpath}.polyline")
        cross.append(CrossLane(direction, polyline))

    polygons = []
    for i, poly in enumerate(_as_list(doc.get("drivable_polygons", []),
                                      f"{path}.drivable_polygons")):
        ppath = f"{path}.drivable_polygons[{i}]"
        pts = tuple(tuple(_number_tuple(p, f"{ppath}[{j}]", 2))
                    for j, p in enumerate(_as_list(poly, ppath)))
        if len(pts) < 3 or abs(_polygon_area(pts)) < 1e-12:
            raise SchemaError("polygon needs >= 3 non-collinear vertices", ppath)
        polygons.append(pts)

    return LaneGraph(same, opposite, tuple(cross), tuple(polygons), width)


def _parse_frame(doc, path: str) -> FrameRecord:
    frame_id = _as_str(_require(doc, "frame_id", path), f"{path}.frame_id")
    ts = _as_int(_require(doc, "timestamp_us", path), f"{path}.timestamp_us")

    ego_doc = _require(doc, "ego", path)
    epath = f"{path}.ego"
    position = _number_tuple(_require(ego_doc, "position", epath), f"{epath}.position", 3)
    rotation = _number_tuple(_require(ego_doc, "rotation", epath), f"{epath}.rotation", 9)
    speed = _as_number(_require(ego_doc, "speed", epath), f"{epath}.speed")
    if speed < 0:
        raise SchemaError("speed must be >= 0", f"{epath}.speed")
    yaw_rate = _as_number(_require(ego_doc, "yaw_rate", epath), f"{epath}.yaw_rate")

    # Ego-to-world pose from the document; stored pose is its inverse.
    ego_to_world = RigidTransform(rotation, position)
    try:
        ego_to_world.require_orthonormal()
    except GeometryError as exc:
        raise GeometryError(f"{epath}.rotation: {exc}") from exc
    world_to_ego = ego_to_world.inverse()
    ego_yaw = ego_to_world.yaw()

    objects = []
    seen_ids: set[str] = set()
    for i, obj in enumerate(_as_list(doc.get("objects", []), f"{path}.objects")):
        opath = f"{path}.objects[{i}]"
        oid = _as_str(_require(obj, "object_id", opath), f"{opath}.object_id")
        if oid in seen_ids:
            raise SchemaError(f"duplicate object_id {oid!r}", f"{opath}.object_id")
        seen_ids.add(oid)
        category = _as_enum(_require(obj, "category", opath), OBJECT_CATEGORIES,
                            f"{opath}.category")
        center_w = _number_tuple(_require(obj, "center", opath), f"{opath}.center", 3)
        size = _number_tuple(_require(obj, "size", opath), f"{opath}.size", 3)
        if any(s <= 0 for s in size):
            raise SchemaError("size components must be > 0", f"{opath}.size")
        yaw_w = _as_number(_require(obj, "yaw", opath), f"{opath}.yaw")
        vel_w = _number_tuple(obj.get("velocity", [0.0, 0.0]), f"{opath}.velocity", 2)
        attributes = obj.get("attributes", {})
        if not isinstance(attributes, dict):
            raise SchemaError("attributes must be an object", f"{opath}.attributes")

        center_e = world_to_ego.apply(np.asarray(center_w))
        c, s = math.cos(-ego_yaw), math.sin(-ego_yaw)
        vel_e = (c * vel_w[0] - s * vel_w[1], s * vel_w[0] + c * vel_w[1])
        objects.append(ObjectAnnotation(
            object_id=oid,
            category=category,
            center=tuple(float(x) for x in center_e),
            size=size,
            yaw=wrap_angle(yaw_w - ego_yaw),
            velocity=(float(vel_e[0]), float(vel_e[1])),
            attributes=dict(attributes),
        ))

    lanes = _parse_lanes(_require(doc, "lanes", path), f"{path}.lanes")
    weather = _as_enum(_require(doc, "weather", path), WEATHER_KINDS, f"{path}.weather")
    road_type = _as_enum(_require(doc, "road_type", path), ROAD_TYPES, f"{path}.road_type")
    media = tuple(_as_str(m, f"{path}.media_refs[{i}]")
                  for i, m in enumerate(_as_list(doc.get("media_refs", []),
                                                 f"{path}.media_refs")))
    extras = {k: v for k, v in doc.items() if k not in _FRAME_KEYS}

    return FrameRecord(
        frame_id=frame_id,
        ego=EgoState(world_to_ego, speed, yaw_rate, ts),
        objects=tuple(objects),
        lanes=lanes,
        weather=weather,
        road_type=road_type,
        media_refs=media,
        extras=extras,
    )


def ingest_scene(raw_scene_doc) -> SceneRecord:
    """Parse one scene document into an immutable :class:`SceneRecord`.

    Accepts a parsed dict or a JSON string. World-frame object annotations
    are converted into the ego frame of their own timestamp.

    Raises:
        SchemaError: missing or mistyped field (message carries the path).
        OrderError: timestamps not strictly increasing.
        GeometryError: ego rotation not orthonormal with det +1.
    """
    if isinstance(raw_scene_doc, (str, bytes)):
        try:
            doc = json.loads(raw_scene_doc)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"document is not valid JSON: {exc}") from exc
    else:
        doc = raw_scene_doc

    scene_id = _as_str(_require(doc, "scene_id", ""), "scene_id")
    raw_frames = _as_list(_require(doc, "frames", ""), "frames")
    if not raw_frames:
        raise SchemaError("scene must contain at least 1 frame", "frames")

    frames = []
    seen_frames: set[str] = set()
    for i, f in enumerate(raw_frames):
        rec = _parse_frame(f, f"frames[{i}]")
        if rec.frame_id in seen_frames:
            raise SchemaError(f"duplicate frame_id {rec.frame_id!r}",
                              f"frames[{i}].frame_id")
        seen_frames.add(rec.frame_id)
        frames.append(rec)

    for prev, cur in zip(frames, frames[1:]):
        if cur.ego.timestamp_us <= prev.ego.timestamp_us:
            raise OrderError(
                f"timestamps not strictly increasing at frame {cur.frame_id!r} "
                f"({cur.ego.timestamp_us} <= {prev.ego.timestamp_us})")

    extras = {k: v for k, v in doc.items() if k not in _SCENE_KEYS}
    return SceneRecord(scene_id, tuple(frames), extras)


# ---------------------------------------------------------------------------
# Database serialization (ego-frame JSONL)


def frame_to_db_obj(scene_id: str, frame: FrameRecord) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene_id,
        "frame_id": frame.frame_id,
        "timestamp_us": frame.ego.timestamp_us,
        "ego": {
            "rotation": list(frame.ego.pose.rotation),
            "translation": list(frame.ego.pose.translation),
            "speed": frame.ego.speed,
            "yaw_rate": frame.ego.yaw_rate,
        },
        "objects": [
            {
                "object_id": o.object_id,
                "category": o.category,
                "center": list(o.center),
                "size": list(o.size),
                "yaw": o.yaw,
                "velocity": list(o.velocity),
                "attributes": o.attributes,
            }
            for o in frame.objects
        ],
        "lanes": {
            "same_direction_lanes": frame.lanes.same_direction_lanes,
            "opposite_direction_lanes": frame.lanes.opposite_direction_lanes,
            "cross_lanes": [
                {"direction": c.direction, "polyline": [list(p) for p in c.polyline]}
                for c in frame.lanes.cross_lanes
            ],
            "drivable_polygons": [[list(p) for p in poly]
                                  for poly in frame.lanes.drivable_polygons],
            "lane_width": frame.lanes.lane_width,
        },
        "weather": frame.weather,
        "road_type": frame.road_type,
        "media_refs": list(frame.media_refs),
        "extras": frame.extras,
    }


def frame_from_db_obj(obj: dict) -> tuple[str, FrameRecord]:
    scene_id = _as_str(_require(obj, "scene_id", ""), "scene_id")
    ego_doc = _require(obj, "ego", "")
    ego = EgoState(
        pose=RigidTransform(tuple(ego_doc["rotation"]), tuple(ego_doc["translation"])),
        speed=float(ego_doc["speed"]),
        yaw_rate=float(ego_doc["yaw_rate"]),
        timestamp_us=int(obj["timestamp_us"]),
    )
    objects = tuple(
        ObjectAnnotation(
            object_id=o["object_id"],
            category=o["category"],
            center=tuple(o["center"]),
            size=tuple(o["size"]),
            yaw=float(o["yaw"]),
            velocity=tuple(o["velocity"]),
            attributes=dict(o.get("attributes", {})),
        )
        for o in obj.get("objects", [])
    )
    lanes_doc = _require(obj, "lanes", "")
    lanes = LaneGraph(
        same_direction_lanes=int(lanes_doc["same_direction_lanes"]),
        opposite_direction_lanes=int(lanes_doc["opposite_direction_lanes"]),
        cross_lanes=tuple(
            CrossLane(c["direction"], tuple(tuple(p) for p in c["polyline"]))
            for c in lanes_doc.get("cross_lanes", [])
        ),
        drivable_polygons=tuple(
            tuple(tuple(p) for p in poly)
            for poly in lanes_doc.get("drivable_polygons", [])
        ),
        lane_width=float(lanes_doc["lane_width"]),
    )
    frame = FrameRecord(
        frame_id=obj["frame_id"],
        ego=ego,
        objects=objects,
        lanes=lanes,
        weather=obj["weather"],
        road_type=obj["road_type"],
        media_refs=tuple(obj.get("media_refs", [])),
        extras=dict(obj.get("extras", {})),
    )
    return scene_id, frame


def dumps_database(scene: SceneRecord) -> list[str]:
    """One deterministic JSON line per frame."""
    return [json.dumps(frame_to_db_obj(scene.scene_id, f), sort_keys=True,
                       separators=(",", ":"))
            for f in scene.frames]


def dump_database(scene: SceneRecord, fp: IO[str]) -> None:
    for line in dumps_database(scene):
        fp.write(line + "\n")


def load_database(lines: Iterable[str]) -> SceneRecord:
    """Rebuild a SceneRecord from its JSONL database lines."""
    scene_id = None
    frames = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        sid, frame = frame_from_db_obj(json.loads(line))
        if scene_id is None:
            scene_id = sid
        elif sid != scene_id:
            raise SchemaError(f"mixed scene ids in database: {scene_id!r} vs {sid!r}")
        frames.append(frame)
    if scene_id is None:
        raise SchemaError("database is empty")
    return SceneRecord(scene_id, tuple(frames))


# ---------------------------------------------------------------------------
# Windows and per-frame queries


def window_starts(num_frames: int, window_len: int, stride: int) -> list[int]:
    """Start indices 0, stride, 2*stride, ... plus an end-anchored window
    when the strided grid would leave trailing frames uncovered."""
    starts = list(range(0, num_frames - window_len + 1, stride))
    last_anchored = num_frames - window_len
    if starts[-1] != last_anchored:
        starts.append(last_anchored)
    return starts


def partition_windows(scene: SceneRecord, window_len: int = DEFAULT_WINDOW_LEN,
                      stride: int = DEFAULT_STRIDE) -> list[SceneWindow]:
    """Slice a scene into overlapping fixed-length windows.

    Every frame lands in at least one window; the final window is anchored
    to end at the last frame when the stride would miss trailing frames.

    Raises:
        TooShortError: scene has fewer than ``window_len`` frames.
    """
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be >= 1")
    if len(scene.frames) < window_len:
        raise TooShortError(
            f"scene {scene.scene_id!r} has {len(scene.frames)} frames, "
            f"needs >= {window_len}")
    return [
        SceneWindow(scene.scene_id, idx, start,
                    scene.frames[start:start + window_len], stride)
        for idx, start in enumerate(window_starts(len(scene.frames), window_len, stride))
    ]


def min_distances(frame: FrameRecord, category: str) -> MinDistances:
    """Count objects of a category and their minimum distance to the ego.

    Distance is the Euclidean norm of the ego-frame center; ``min_distance``
    is None when the frame has no such objects.
    """
    dists = [math.sqrt(o.center[0] ** 2 + o.center[1] ** 2 + o.center[2] ** 2)
             for o in frame.objects if o.category == category]
    if not dists:
        return MinDistances(0, None)
    return MinDistances(len(dists), min(dists))
