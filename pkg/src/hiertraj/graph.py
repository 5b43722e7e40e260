"""Agent-centric heterogeneous local graphs: two node types (lane, agent),
four directional edge types (front/left/back/right) relative to the center
agent's heading. Star topology: every non-center node connects to the center."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .scene import LaneNode, Scene

DIRECTIONS = ("front", "left", "back", "right")

NODE_AGENT = "agent"
NODE_LANE = "lane"


def direction_label(bearing: float) -> str:
    """Quadrant of a bearing (radians, relative to the center heading).

    Half-open quadrants: front [-45, 45), left [45, 135), back [135, 225),
    right [225, 315) degrees.
    """
    deg = math.degrees(bearing) % 360.0
    if deg >= 315.0 or deg < 45.0:
        return "front"
    if deg < 135.0:
        return "left"
    if deg < 225.0:
        return "back"
    return "right"


@dataclass(eq=False)
class GraphNode:
    kind: str                     # NODE_AGENT or NODE_LANE
    ref: str                      # agent id, or "laneletid#index"
    position: np.ndarray
    agent_index: int | None = None
    lane: LaneNode | None = None


@dataclass(eq=False)
class GraphEdge:
    node_index: int
    direction: str
    relative_position: np.ndarray  # source w.r.t. center, center-heading frame


@dataclass(eq=False)
class HeteroGraph:
    center_agent_id: str
    center_index: int
    center_position: np.ndarray
    center_heading: float
    nodes: list[GraphNode]
    edges: list[GraphEdge]

    def nodes_in_direction(self, direction: str) -> list[int]:
        return [e.node_index for e in self.edges if e.direction == direction]


def build_hetero_graph(scene: Scene, center_agent_id: str, radius: float) -> HeteroGraph:
    """All agents and lane nodes within `radius` of the center's last position.

    Each neighbor gets one directed edge toward the center, labeled with the
    quadrant of its bearing relative to the center heading.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = scene.agent(center_agent_id)
    center_pos = center.position
    center_heading = scene.agent_heading(center_agent_id)

    nodes: list[GraphNode] = []
    center_index = -1
    for i, agent in enumerate(scene.agents):
        if agent.id == center_agent_id:
            center_index = i
            continue
        if np.linalg.norm(agent.position - center_pos) <= radius:
            nodes.append(GraphNode(
                kind=NODE_AGENT, ref=agent.id, position=agent.position, agent_index=i))
    for lane_node in scene.all_lane_nodes():
        if np.linalg.norm(lane_node.position - center_pos) <= radius:
            nodes.append(GraphNode(
                kind=NODE_LANE,
                ref=f"{lane_node.lanelet_id}#{lane_node.index}",
                position=lane_node.position,
                lane=lane_node,
            ))

    edges = []
    for idx, node in enumerate(nodes):
        rel = geometry.to_frame(node.position, center_pos, center_heading)[0]
        bearing = math.atan2(rel[1], rel[0])
        edges.append(GraphEdge(node_index=idx, direction=direction_label(bearing),
                               relative_position=rel))
    return HeteroGraph(
        center_agent_id=center_agent_id,
        center_index=center_index,
        center_position=center_pos,
        center_heading=center_heading,
        nodes=nodes,
        edges=edges,
    )
