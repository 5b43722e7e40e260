"""Map and agent data model, lane-node extraction, and scene file I/O.

Scene files are UTF-8 JSON with top-level keys `lanelets` and `agents`;
coordinates are meters in one global frame, timestamps are seconds, agent
histories are 20 states at 10 Hz and optional futures are exactly 30.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry

HISTORY_LEN = 20
FUTURE_LEN = 30
DT = 0.1
LANE_NODE_SPACING = 2.0

DIRECTION_ATTRS = ("same", "opposite")
PASSABLE_STATES = ("green", "red", "uncontrolled")


class SceneFormatError(ValueError):
    """Scene file cannot be parsed; message carries line/field context."""


class SceneValidationError(ValueError):
    """Scene content violates a structural invariant."""


def _as_polyline(value, where: str, min_points: int = 2) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{where}: not a numeric point list ({exc})") from None
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise SceneFormatError(f"{where}: expected [[x, y], ...], got shape {arr.shape}")
    if len(arr) < min_points:
        raise SceneFormatError(f"{where}: needs at least {min_points} points")
    return arr


@dataclass(eq=False)
class Lanelet:
    id: str
    centerline: np.ndarray
    left_boundary: np.ndarray
    right_boundary: np.ndarray
    successors: tuple[str, ...] = ()
    predecessors: tuple[str, ...] = ()
    left_neighbor: str | None = None
    right_neighbor: str | None = None
    direction_attr: str = "same"
    passable: str = "uncontrolled"

    def __post_init__(self):
        if len(self.centerline) < 2:
            raise SceneValidationError(f"lanelet {self.id}: centerline needs >= 2 points")
        steps = np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)
        if np.any(steps <= 0.0):
            raise SceneValidationError(f"lanelet {self.id}: consecutive centerline points coincide")
        if self.direction_attr not in DIRECTION_ATTRS:
            raise SceneValidationError(
                f"lanelet {self.id}: direction_attr {self.direction_attr!r} not in {DIRECTION_ATTRS}")
        if self.passable not in PASSABLE_STATES:
            raise SceneValidationError(
                f"lanelet {self.id}: passable {self.passable!r} not in {PASSABLE_STATES}")

    def polygon(self) -> np.ndarray:
        """Boundary polygon: left boundary forward, right boundary back."""
        return np.vstack([self.left_boundary, self.right_boundary[::-1]])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Lanelet):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.centerline, other.centerline)
            and np.array_equal(self.left_boundary, other.left_boundary)
            and np.array_equal(self.right_boundary, other.right_boundary)
            and self.successors == other.successors
            and self.predecessors == other.predecessors
            and self.left_neighbor == other.left_neighbor
            and self.right_neighbor == other.right_neighbor
            and self.direction_attr == other.direction_attr
            and self.passable == other.passable
        )


@dataclass(eq=False)
class AgentTrack:
    """History of 20 (t, x, y) rows at 10 Hz; optional 30-row future."""

    id: str
    history: np.ndarray
    future_gt: np.ndarray | None = None

    def __post_init__(self):
        if self.history.shape != (HISTORY_LEN, 3):
            raise SceneValidationError(
                f"agent {self.id}: history must be {HISTORY_LEN} (t, x, y) rows, got {self.history.shape}")
        dt = np.diff(self.history[:, 0])
        if np.any(np.abs(dt - DT) > 1e-6):
            raise SceneValidationError(f"agent {self.id}: history not strictly at {DT} s spacing")
        if self.future_gt is not None and self.future_gt.shape != (FUTURE_LEN, 3):
            raise SceneValidationError(
                f"agent {self.id}: future_gt must be {FUTURE_LEN} rows, got {self.future_gt.shape}")

    @property
    def position(self) -> np.ndarray:
        """Last observed position."""
        return self.history[-1, 1:3]

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.history[-1, 1:3] - self.history[-2, 1:3]) / DT)

    def displacement_heading(self) -> float | None:
        """Heading of the last non-degenerate displacement, None if stationary."""
        for i in range(HISTORY_LEN - 1, 0, -1):
            d = self.history[i, 1:3] - self.history[i - 1, 1:3]
            if np.linalg.norm(d) > 1e-9:
                return math.atan2(d[1], d[0])
        return None

    def __eq__(self, other) -> bool:
        if not isinstance(other, AgentTrack):
            return NotImplemented
        same_future = (
            (self.future_gt is None and other.future_gt is None)
            or (self.future_gt is not None and other.future_gt is not None
                and np.array_equal(self.future_gt, other.future_gt))
        )
        return self.id == other.id and np.array_equal(self.history, other.history) and same_future


@dataclass(eq=False)
class LaneNode:
    """One resampled centerline segment, the atomic map element for graphs."""

    lanelet_id: str
    index: int
    position: np.ndarray          # segment midpoint
    direction: np.ndarray         # unit vector along the segment
    length: float
    direction_attr: str
    passable: str
    boundary_left: float          # signed lateral offset to the left boundary (>= 0)
    boundary_right: float         # signed lateral offset to the right boundary (<= 0)


@dataclass(eq=False)
class Scene:
    lanelets: dict[str, Lanelet]
    agents: list[AgentTrack]
    _lane_node_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for lanelet in self.lanelets.values():
            for kind, refs in (("successor", lanelet.successors),
                               ("predecessor", lanelet.predecessors),
                               ("left_neighbor", (lanelet.left_neighbor,)),
                               ("right_neighbor", (lanelet.right_neighbor,))):
                for ref in refs:
                    if ref is not None and ref not in self.lanelets:
                        raise SceneValidationError(
                            f"lanelet {lanelet.id}: {kind} reference {ref!r} does not resolve")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise SceneValidationError("duplicate agent ids")
        if self.lanelets and self.agents:
            lo, hi = self.bbox()
            margin = 50.0
            for agent in self.agents:
                p = agent.position
                if np.any(p < lo - margin) or np.any(p > hi + margin):
                    raise SceneValidationError(
                        f"agent {agent.id}: last position {p.tolist()} far outside map bbox")

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.vstack([l.polygon() for l in self.lanelets.values()])
        return pts.min(axis=0), pts.max(axis=0)

    def agent(self, agent_id: str) -> AgentTrack:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise SceneValidationError(f"unknown agent id {agent_id!r}")

    def agent_heading(self, agent_id: str) -> float:
        """Displacement heading; a stationary agent inherits its lanelet's direction."""
        track = self.agent(agent_id)
        heading = track.displacement_heading()
        if heading is not None:
            return heading
        lanelet_id, _, s = self.nearest_lanelet(track.position)
        return geometry.heading_at_arclength(self.lanelets[lanelet_id].centerline, s)

    def nearest_lanelet(self, point: np.ndarray) -> tuple[str, np.ndarray, float]:
        """(lanelet id, foot point on its centerline, arc length of the foot)."""
        if not self.lanelets:
            raise SceneValidationError("scene has no lanelets")
        best = None
        for lanelet in self.lanelets.values():
            foot, dist, s = geometry.project_to_polyline(point, lanelet.centerline)
            if best is None or dist < best[0]:
                best = (dist, lanelet.id, foot, s)
        return best[1], best[2], best[3]

    def in_drivable_area(self, point) -> bool:
        """Point lies inside (or on the boundary of) any lanelet polygon."""
        return any(geometry.point_in_polygon(point, l.polygon()) for l in self.lanelets.values())

    def lane_nodes(self, lanelet_id: str, spacing: float = LANE_NODE_SPACING) -> list[LaneNode]:
        key = (lanelet_id, spacing)
        if key not in self._lane_node_cache:
            self._lane_node_cache[key] = _build_lane_nodes(self.lanelets[lanelet_id], spacing)
        return self._lane_node_cache[key]

    def all_lane_nodes(self, spacing: float = LANE_NODE_SPACING) -> list[LaneNode]:
        out: list[LaneNode] = []
        for lanelet_id in self.lanelets:
            out.extend(self.lane_nodes(lanelet_id, spacing))
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return self.lanelets == other.lanelets and self.agents == other.agents


def _build_lane_nodes(lanelet: Lanelet, spacing: float) -> list[LaneNode]:
    pts = geometry.resample_polyline(lanelet.centerline, spacing)
    nodes = []
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        seg = b - a
        length = float(np.linalg.norm(seg))
        if length < 1e-9:
            continue
        mid = (a + b) / 2.0
        _, d_left, _ = geometry.project_to_polyline(mid, lanelet.left_boundary)
        _, d_right, _ = geometry.project_to_polyline(mid, lanelet.right_boundary)
        nodes.append(LaneNode(
            lanelet_id=lanelet.id,
            index=i,
            position=mid,
            direction=seg / length,
            length=length,
            direction_attr=lanelet.direction_attr,
            passable=lanelet.passable,
            boundary_left=d_left,
            boundary_right=-d_right,
        ))
    return nodes


# -- file I/O -------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    lanelets = []
    for l in scene.lanelets.values():
        lanelets.append({
            "id": l.id,
            "centerline": l.centerline.tolist(),
            "left_boundary": l.left_boundary.tolist(),
            "right_boundary": l.right_boundary.tolist(),
            "successors": list(l.successors),
            "predecessors": list(l.predecessors),
            "left_neighbor": l.left_neighbor,
            "right_neighbor": l.right_neighbor,
            "direction_attr": l.direction_attr,
            "passable": l.passable,
        })
    agents = []
    for a in scene.agents:
        entry = {"id": a.id, "history": a.history.tolist()}
        if a.future_gt is not None:
            entry["future_gt"] = a.future_gt.tolist()
        agents.append(entry)
    return {"lanelets": lanelets, "agents": agents}


def scene_from_dict(doc: dict) -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError("top level must be an object")
    for key in ("lanelets", "agents"):
        if key not in doc:
            raise SceneFormatError(f"missing top-level key {key!r}")
    lanelets: dict[str, Lanelet] = {}
    for i, entry in enumerate(doc["lanelets"]):
        where = f"lanelets[{i}]"
        if not isinstance(entry, dict) or "id" not in entry:
            raise SceneFormatError(f"{where}: missing field 'id'")
        lid = str(entry["id"])
        try:
            lanelet = Lanelet(
                id=lid,
                centerline=_as_polyline(entry["centerline"], f"{where}.centerline"),
                left_boundary=_as_polyline(entry["left_boundary"], f"{where}.left_boundary"),
                right_boundary=_as_polyline(entry["right_boundary"], f"{where}.right_boundary"),
                successors=tuple(entry.get("successors", ())),
                predecessors=tuple(entry.get("predecessors", ())),
                left_neighbor=entry.get("left_neighbor"),
                right_neighbor=entry.get("right_neighbor"),
                direction_attr=entry.get("direction_attr", "same"),
                passable=entry.get("passable", "uncontrolled"),
            )
        except KeyError as exc:
            raise SceneFormatError(f"{where}: missing field {exc.args[0]!r}") from None
        if lid in lanelets:
            raise SceneFormatError(f"{where}: duplicate lanelet id {lid!r}")
        lanelets[lid] = lanelet
    agents = []
    for i, entry in enumerate(doc["agents"]):
        where = f"agents[{i}]"
        if not isinstance(entry, dict) or "id" not in entry:
            raise SceneFormatError(f"{where}: missing field 'id'")
        try:
            history = np.asarray(entry["history"], dtype=float)
        except KeyError:
            raise SceneFormatError(f"{where}: missing field 'history'") from None
        except (TypeError, ValueError) as exc:
            raise SceneFormatError(f"{where}.history: {exc}") from None
        future = entry.get("future_gt")
        future_arr = None
        if future is not None:
            try:
                future_arr = np.asarray(future, dtype=float)
            except (TypeError, ValueError) as exc:
                raise SceneFormatError(f"{where}.future_gt: {exc}") from None
        agents.append(AgentTrack(id=str(entry["id"]), history=history, future_gt=future_arr))
    return Scene(lanelets=lanelets, agents=agents)


def save_scene(scene: Scene, path: str) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    payload = json.dumps(scene_to_dict(scene), indent=1)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
        fh.write("\n")
    os.replace(tmp, path)


def load_scene(path: str) -> Scene:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return scene_from_dict(doc)
