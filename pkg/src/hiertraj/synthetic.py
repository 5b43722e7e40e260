"""Seeded synthetic scenes: small lanelet maps plus lane-following agents.

Each kind lays out a fixed topology (with seeded dimensions and a seeded
rigid transform), then places agents on lane routes with constant speed:
noisy 20-step histories and exact 30-step lane-following futures.
"""

from __future__ import annotations

import math

import numpy as np

from . import geometry
from .scene import DT, FUTURE_LEN, HISTORY_LEN, AgentTrack, Lanelet, Scene

LANE_WIDTH = 3.6
SCENE_KINDS = ("straight", "curve", "merge", "intersection")


def _lanelet_from_centerline(lid: str, centerline: np.ndarray, **kw) -> Lanelet:
    return Lanelet(
        id=lid,
        centerline=centerline,
        left_boundary=geometry.offset_polyline(centerline, LANE_WIDTH / 2),
        right_boundary=geometry.offset_polyline(centerline, -LANE_WIDTH / 2),
        **kw,
    )


def _line(p0, p1, step: float = 5.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    return np.linspace(p0, p1, n)


def _arc(start, heading: float, radius: float, sweep: float, step: float = 2.0) -> np.ndarray:
    """Arc from `start` with initial `heading`; positive sweep turns left."""
    sign = 1.0 if sweep >= 0 else -1.0
    center = np.asarray(start, float) + radius * np.array(
        [math.cos(heading + sign * math.pi / 2), math.sin(heading + sign * math.pi / 2)])
    n = max(2, int(math.ceil(abs(sweep) * radius / step)) + 1)
    phis = np.linspace(0.0, sweep, n)
    out = np.empty((n, 2))
    for i, phi in enumerate(phis):
        ang = heading - sign * math.pi / 2 + phi
        out[i] = center + radius * np.array([math.cos(ang), math.sin(ang)])
    return out


def _build_straight(rng: np.random.Generator):
    length = 120.0
    half = length / 2
    lanelets = {}
    for lane, y in (("A", 0.0), ("B", LANE_WIDTH)):
        c_full = _line((0.0, y), (length, y))
        c1, c2 = _line((0.0, y), (half, y)), _line((half, y), (length, y))
        lanelets[f"{lane}1"] = _lanelet_from_centerline(f"{lane}1", c1, successors=(f"{lane}2",))
        lanelets[f"{lane}2"] = _lanelet_from_centerline(f"{lane}2", c2, predecessors=(f"{lane}1",))
    lanelets["A1"].left_neighbor = "B1"
    lanelets["A2"].left_neighbor = "B2"
    lanelets["B1"].right_neighbor = "A1"
    lanelets["B2"].right_neighbor = "A2"
    # opposite-direction lane above lane B
    y_opp = 2 * LANE_WIDTH
    c_opp = _line((length, y_opp), (0.0, y_opp))
    lanelets["C1"] = _lanelet_from_centerline("C1", c_opp, direction_attr="opposite")
    routes = [["A1", "A2"], ["B1", "B2"], ["C1"]]
    return lanelets, routes


def _build_curve(rng: np.random.Generator):
    radius = float(rng.uniform(12.0, 22.0))
    turn = 1.0 if rng.random() < 0.5 else -1.0
    lead = _line((0.0, 0.0), (20.0, 0.0))
    arc = _arc((20.0, 0.0), 0.0, radius, turn * math.pi / 2)
    exit_heading = turn * math.pi / 2
    exit_dir = np.array([math.cos(exit_heading), math.sin(exit_heading)])
    tail = _line(arc[-1], arc[-1] + 20.0 * exit_dir)
    lanelets = {
        "in": _lanelet_from_centerline("in", lead, successors=("bend",)),
        "bend": _lanelet_from_centerline("bend", arc, successors=("out",), predecessors=("in",)),
        "out": _lanelet_from_centerline("out", tail, predecessors=("bend",)),
    }
    return lanelets, [["in", "bend", "out"]]


def _build_merge(rng: np.random.Generator):
    junction = np.array([50.0, 0.0])
    angle = math.radians(float(rng.uniform(10.0, 18.0)))
    ramp_start = junction - 55.0 * np.array([math.cos(angle), math.sin(angle)]) * np.array([1, -1])
    lanelets = {
        "M1": _lanelet_from_centerline("M1", _line((0.0, 0.0), junction), successors=("M2",)),
        "M2": _lanelet_from_centerline("M2", _line(junction, (120.0, 0.0)),
                                       predecessors=("M1", "R")),
        "R": _lanelet_from_centerline("R", _line(ramp_start, junction), successors=("M2",)),
    }
    return lanelets, [["M1", "M2"], ["R", "M2"]]


def _build_intersection(rng: np.random.Generator):
    ew_state = "green" if rng.random() < 0.5 else "uncontrolled"
    ns_state = "red" if ew_state == "green" else "uncontrolled"
    lanelets = {
        "EW": _lanelet_from_centerline("EW", _line((-60.0, 0.0), (60.0, 0.0)), passable=ew_state),
        "NS": _lanelet_from_centerline("NS", _line((0.0, -60.0), (0.0, 60.0)), passable=ns_state),
    }
    return lanelets, [["EW"], ["NS"]]


_BUILDERS = {
    "straight": _build_straight,
    "curve": _build_curve,
    "merge": _build_merge,
    "intersection": _build_intersection,
}


def _transform_scene(lanelets: dict[str, Lanelet], rng: np.random.Generator):
    """Seeded rigid transform so scenes do not share a privileged frame."""
    theta = float(rng.uniform(-math.pi, math.pi))
    offset = rng.uniform(-150.0, 150.0, size=2)
    rot = geometry.rotation_matrix(theta).T

    def tx(points: np.ndarray) -> np.ndarray:
        return points @ rot + offset

    out = {}
    for lid, l in lanelets.items():
        out[lid] = Lanelet(
            id=l.id,
            centerline=tx(l.centerline),
            left_boundary=tx(l.left_boundary),
            right_boundary=tx(l.right_boundary),
            successors=l.successors,
            predecessors=l.predecessors,
            left_neighbor=l.left_neighbor,
            right_neighbor=l.right_neighbor,
            direction_attr=l.direction_attr,
            passable=l.passable,
        )
    return out, tx


def generate_synthetic_scene(
    kind: str,
    n_agents: int,
    seed: int,
    noise_std: float = 0.05,
    speed_range: tuple[float, float] = (4.0, 9.0),
) -> Scene:
    """Deterministic scene of the given kind with `n_agents` lane followers."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    rng = np.random.default_rng(seed)
    lanelets, routes = _BUILDERS[kind](rng)

    route_polylines = [
        np.vstack([lanelets[lid].centerline for lid in route]) for route in routes
    ]
    horizon = (HISTORY_LEN - 1 + FUTURE_LEN) * DT

    per_route: dict[int, int] = {}
    assignments = [i % len(routes) for i in range(n_agents)]
    agents = []
    for i, route_idx in enumerate(assignments):
        poly = route_polylines[route_idx]
        total = geometry.polyline_length(poly)
        v = float(rng.uniform(*speed_range))
        budget = total - v * horizon - 2.0
        if budget < 1.0:
            v = max(1.0, (total - 4.0) / horizon)
            budget = total - v * horizon - 2.0
        slot = per_route.get(route_idx, 0)
        per_route[route_idx] = slot + 1
        n_slots = sum(1 for a in assignments if a == route_idx)
        lo = 1.0 + budget * slot / n_slots
        hi = 1.0 + budget * (slot + 0.8) / n_slots
        s0 = float(rng.uniform(lo, hi))

        times = np.arange(HISTORY_LEN + FUTURE_LEN) * DT
        stations = s0 + v * times
        positions = np.array([geometry.point_at_arclength(poly, s) for s in stations])
        history = np.column_stack([times[:HISTORY_LEN], positions[:HISTORY_LEN]])
        history[:, 1:3] += rng.normal(0.0, noise_std, size=(HISTORY_LEN, 2))
        future = np.column_stack([times[HISTORY_LEN:], positions[HISTORY_LEN:]])
        agents.append((f"agent{i}", history, future))

    lanelets, tx = _transform_scene(lanelets, rng)
    tracks = []
    for aid, history, future in agents:
        history[:, 1:3] = tx(history[:, 1:3])
        future[:, 1:3] = tx(future[:, 1:3])
        tracks.append(AgentTrack(id=aid, history=history, future_gt=future))
    return Scene(lanelets=lanelets, agents=tracks)
