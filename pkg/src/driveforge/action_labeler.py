"""Discrete driving-action labels derived from ego trajectories.

Four label axes, all closed vocabularies:

* speed_state:  Crawling | ModerateSpeed | MovingFast
* longitudinal: Accelerate | Decelerate | MaintainSpeed | VehicleStarting | Stop
* maneuver:     GoStraight | LaneChangeLeft | LaneChangeRight | TurnLeft | TurnRight
* command:      Forward | Left | Right

All classifiers are pure functions of (speed, trajectory, lanes, thresholds),
so identical inputs always produce identical labels and per-window labeling
can run in parallel without coordination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, DegenerateTrajectoryError
from .scene_store import FrameRecord, LaneGraph
from .transforms import wrap_angle

SPEED_STATES = ("Crawling", "ModerateSpeed", "MovingFast")
LONGITUDINAL_ACTIONS = ("Accelerate", "Decelerate", "MaintainSpeed",
                        "VehicleStarting", "Stop")
MANEUVERS = ("GoStraight", "LaneChangeLeft", "LaneChangeRight",
             "TurnLeft", "TurnRight")
COMMANDS = ("Forward", "Left", "Right")

MIN_HORIZON_S = 0.5
DEFAULT_LANE_WIDTH_M = 3.5


@dataclass(frozen=True)
class LabelerThresholds:
    """Label boundaries; the vocabulary is fixed, the numbers are config."""

    t_crawl: float = 2.0   # m/s, Crawling below this
    t_fast: float = 8.0    # m/s, MovingFast at or above this
    t_stop: float = 0.5    # m/s, end speed below this means Stop
    t_dv: float = 1.0      # m/s, speed delta for Accelerate/Decelerate
    t_turn_deg: float = 45.0  # deg, net heading change for a turn

    def validate(self) -> "LabelerThresholds":
        if self.t_crawl >= self.t_fast:
            raise ConfigError(
                f"t_crawl ({self.t_crawl}) must be < t_fast ({self.t_fast})")
        if min(self.t_crawl, self.t_fast, self.t_stop, self.t_dv,
               self.t_turn_deg) < 0:
            raise ConfigError("labeler thresholds must be >= 0")
        return self


DEFAULT_THRESHOLDS = LabelerThresholds()


@dataclass(frozen=True)
class Waypoint:
    t: float                       # seconds from now, >= 0
    position: tuple[float, float]  # meters, ego frame at t0
    heading: float                 # radians


@dataclass(frozen=True)
class TrajectorySample:
    waypoints: tuple[Waypoint, ...]
    horizon: float


@dataclass(frozen=True)
class ActionLabel:
    speed_state: str
    longitudinal: str
    maneuver: str
    command: str


def make_trajectory(waypoints) -> TrajectorySample:
    """Build a validated TrajectorySample from (t, (x, y), heading) triples."""
    wps = tuple(Waypoint(float(t), (float(p[0]), float(p[1])), float(h))
                for t, p, h in waypoints)
    if len(wps) < 2:
        raise DegenerateTrajectoryError("trajectory needs >= 2 waypoints")
    if wps[0].t < 0:
        raise DegenerateTrajectoryError("waypoint times must start >= 0")
    for a, b in zip(wps, wps[1:]):
        if b.t <= a.t:
            raise DegenerateTrajectoryError("waypoint times must strictly increase")
    return TrajectorySample(wps, wps[-1].t)


def ego_trajectory(frames: tuple[FrameRecord, ...]) -> tuple[float, TrajectorySample]:
    """Current speed plus the future ego trajectory over a frame sequence.

    The first frame is "now": later ego origins are expressed in its ego
    frame, headings are relative yaw, and times are seconds since it.
    """
    if len(frames) < 3:
        raise DegenerateTrajectoryError("need >= 3 frames for a trajectory")
    anchor = frames[0]
    t0 = anchor.ego.timestamp_us
    waypoints = []
    for frame in frames[1:]:
        rel = anchor.ego.pose.compose(frame.ego.pose.inverse())
        pos = rel.t
        waypoints.append(((frame.ego.timestamp_us - t0) / 1e6,
                          (float(pos[0]), float(pos[1])), rel.yaw()))
    return anchor.ego.speed, make_trajectory(waypoints)


# ---------------------------------------------------------------------------
# Classifiers


def classify_speed_state(current_speed: float,
                         thresholds: LabelerThresholds = DEFAULT_THRESHOLDS) -> str:
    """Bucket the current speed; boundary values belong to the higher class."""
    if current_speed < 0:
        raise ValueError("speed must be >= 0")
    thresholds.validate()
    if current_speed < thresholds.t_crawl:
        return "Crawling"
    if current_speed < thresholds.t_fast:
        return "ModerateSpeed"
    return "MovingFast"


def _segment_speeds(traj: TrajectorySample) -> list[tuple[float, float]]:
    """(midpoint time, speed) per consecutive waypoint pair, finite differences."""
    out = []
    for a, b in zip(traj.waypoints, traj.waypoints[1:]):
        dt = b.t - a.t
        dist = math.dist(a.position, b.position)
        out.append(((a.t + b.t) / 2.0, dist / dt))
    return out


def trajectory_end_speed(traj: TrajectorySample) -> float:
    """Mean finite-difference speed over the final third of the horizon.

    Falls back to the last segment when no segment midpoint lands there.
    """
    segments = _segment_speeds(traj)
    cutoff = traj.horizon * (2.0 / 3.0)
    tail = [v for (tm, v) in segments if tm >= cutoff]
    if not tail:
        tail = [segments[-1][1]]
    return sum(tail) / len(tail)


def label_longitudinal(current_speed: float, traj: TrajectorySample,
                       thresholds: LabelerThresholds = DEFAULT_THRESHOLDS) -> str:
    """Future longitudinal action from the end-of-horizon speed.

    Precedence is fixed: Stop, then VehicleStarting, then Accelerate or
    Decelerate, then MaintainSpeed.
    """
    thresholds.validate()
    if traj.horizon < MIN_HORIZON_S:
        raise DegenerateTrajectoryError(
            f"horizon {traj.horizon:.3f}s < {MIN_HORIZON_S}s")
    v_end = trajectory_end_speed(traj)
    if v_end < thresholds.t_stop:
        return "Stop"
    if current_speed < thresholds.t_crawl and v_end >= thresholds.t_crawl:
        return "VehicleStarting"
    if v_end - current_speed > thresholds.t_dv:
        return "Accelerate"
    if current_speed - v_end > thresholds.t_dv:
        return "Decelerate"
    return "MaintainSpeed"


def _lateral_offset(traj: TrajectorySample) -> float:
    """Signed offset of the final waypoint from the initial heading line.

    Positive is left of the line (counterclockwise yaw, +y left).
    """
    first, last = traj.waypoints[0], traj.waypoints[-1]
    ux, uy = math.cos(first.heading), math.sin(first.heading)
    vx = last.position[0] - first.position[0]
    vy = last.position[1] - first.position[1]
    return ux * vy - uy * vx


def label_maneuver(traj: TrajectorySample, lanes: LaneGraph | None = None,
                   thresholds: LabelerThresholds = DEFAULT_THRESHOLDS) -> str:
    """Maneuver from net heading change, then lateral offset.

    A turn wins whenever |heading change| exceeds the turn threshold; below
    it, a lateral offset beyond half a lane width is a lane change. The
    offset is measured against the initial heading line, not lane
    centerlines, so the label survives missing lane polylines.
    """
    thresholds.validate()
    if traj.horizon < MIN_HORIZON_S:
        raise DegenerateTrajectoryError(
            f"horizon {traj.horizon:.3f}s < {MIN_HORIZON_S}s")
    dpsi = wrap_angle(traj.waypoints[-1].heading - traj.waypoints[0].heading)
    turn_rad = math.radians(thresholds.t_turn_deg)
    if abs(dpsi) > turn_rad:
        return "TurnLeft" if dpsi > 0 else "TurnRight"
    lane_width = lanes.lane_width if lanes is not None else DEFAULT_LANE_WIDTH_M
    offset = _lateral_offset(traj)
    if abs(offset) > lane_width / 2.0:
        return "LaneChangeLeft" if offset > 0 else "LaneChangeRight"
    return "GoStraight"


def derive_command(traj: TrajectorySample,
                   thresholds: LabelerThresholds = DEFAULT_THRESHOLDS,
                   lanes: LaneGraph | None = None) -> str:
    """High-level command: the side of any turn or lane change, else Forward."""
    maneuver = label_maneuver(traj, lanes, thresholds)
    if maneuver in ("TurnLeft", "LaneChangeLeft"):
        return "Left"
    if maneuver in ("TurnRight", "LaneChangeRight"):
        return "Right"
    return "Forward"


def label_action(current_speed: float, traj: TrajectorySample,
                 lanes: LaneGraph | None = None,
                 thresholds: LabelerThresholds = DEFAULT_THRESHOLDS) -> ActionLabel:
    """All four label axes for one trajectory."""
    maneuver = label_maneuver(traj, lanes, thresholds)
    if maneuver in ("TurnLeft", "LaneChangeLeft"):
        command = "Left"
    elif maneuver in ("TurnRight", "LaneChangeRight"):
        command = "Right"
    else:
        command = "Forward"
    return ActionLabel(
        speed_state=classify_speed_state(current_speed, thresholds),
        longitudinal=label_longitudinal(current_speed, traj, thresholds),
        maneuver=maneuver,
        command=command,
    )
