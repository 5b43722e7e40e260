import math

import numpy as np
import pytest

from hiertraj import geometry
from hiertraj.scene import DT, HISTORY_LEN, AgentTrack, Lanelet, Scene


def straight_lanelet(lid="L1", y=0.0, x0=0.0, x1=100.0, width=3.6, **kw) -> Lanelet:
    center = np.array([[x0, y], [x1, y]])
    return Lanelet(
        id=lid,
        centerline=center,
        left_boundary=center + [0.0, width / 2],
        right_boundary=center - [0.0, width / 2],
        **kw,
    )


def agent_at(aid, position, heading=0.0, speed=5.0, future_speed=None,
             t_end=1.9) -> AgentTrack:
    """Constant-velocity history ending at `position` with the given heading."""
    position = np.asarray(position, dtype=float)
    direction = np.array([math.cos(heading), math.sin(heading)])
    times = t_end - DT * np.arange(HISTORY_LEN - 1, -1, -1)
    steps = np.arange(HISTORY_LEN - 1, -1, -1, dtype=float)
    points = position - np.outer(steps, direction * speed * DT)
    history = np.column_stack([times, points])
    future = None
    if future_speed is not None:
        ftimes = times[-1] + DT * np.arange(1, 31)
        fpoints = position + np.outer(np.arange(1, 31, dtype=float), direction * future_speed * DT)
        future = np.column_stack([ftimes, fpoints])
    return AgentTrack(id=aid, history=history, future_gt=future)


def single_lane_scene(agent_speed=5.0, lane_length=200.0, with_future=True) -> Scene:
    lane = straight_lanelet("L1", y=0.0, x0=0.0, x1=lane_length)
    agent = agent_at("a0", (30.0, 0.0), heading=0.0, speed=agent_speed,
                     future_speed=agent_speed if with_future else None)
    return Scene(lanelets={"L1": lane}, agents=[agent])


@pytest.fixture
def lane_scene():
    return single_lane_scene()


def rotate_scene(scene: Scene, theta: float, offset=(0.0, 0.0)) -> Scene:
    """Rigidly transform every map point and trajectory in the scene."""
    rot = geometry.rotation_matrix(theta).T
    offset = np.asarray(offset, dtype=float)

    def tx(pts):
        return np.asarray(pts) @ rot + offset

    lanelets = {}
    for lid, l in scene.lanelets.items():
        lanelets[lid] = Lanelet(
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
    agents = []
    for a in scene.agents:
        history = a.history.copy()
        history[:, 1:3] = tx(history[:, 1:3])
        future = None
        if a.future_gt is not None:
            future = a.future_gt.copy()
            future[:, 1:3] = tx(future[:, 1:3])
        agents.append(AgentTrack(id=a.id, history=history, future_gt=future))
    return Scene(lanelets=lanelets, agents=agents)
