"""Deterministic SVG rendering of scenes, predictions, key positions and
episode traces. Plain string assembly: byte-stable output, no imaging
dependency, diffable in tests."""

from __future__ import annotations

import json

import numpy as np

from .encoder import KeyPositionSet
from .metrics import PredictionSet
from .scene import Scene

SCALE = 6.0          # px per meter
PADDING = 8.0        # meters around the content bbox

MODE_COLORS = ("#e6550d", "#fd8d3c", "#fdae6b", "#fdd0a2", "#a63603", "#f16913")
AGENT_TRACE_COLORS = ("#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#17becf",
                      "#bcbd22", "#e377c2", "#7f7f7f")


class _Canvas:
    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = lo - PADDING
        self.hi = hi + PADDING
        size = (self.hi - self.lo) * SCALE
        self.width = size[0]
        self.height = size[1]
        self.parts: list[str] = []

    def pt(self, p) -> tuple[float, float]:
        # y grows upward in world coordinates, downward in SVG
        return ((p[0] - self.lo[0]) * SCALE, (self.hi[1] - p[1]) * SCALE)

    def path(self, points, stroke: str, width: float = 1.0, fill: str = "none",
             dash: str | None = None, opacity: float = 1.0, close: bool = False):
        coords = " ".join("%.2f,%.2f" % self.pt(p) for p in points)
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        op_attr = f' opacity="%.3f"' % opacity if opacity != 1.0 else ""
        tag = "polygon" if close else "polyline"
        self.parts.append(
            f'<{tag} points="{coords}" fill="{fill}" stroke="{stroke}" '
            f'stroke-width="%.2f"{dash_attr}{op_attr} />' % width)

    def circle(self, center, radius_px: float, fill: str, opacity: float = 1.0):
        x, y = self.pt(center)
        op_attr = f' opacity="%.3f"' % opacity if opacity != 1.0 else ""
        self.parts.append(
            '<circle cx="%.2f" cy="%.2f" r="%.2f" fill="%s"%s />'
            % (x, y, radius_px, fill, op_attr))

    def render(self, run: dict | None = None) -> str:
        comment = f"<!-- run: {json.dumps(run)} -->\n" if run is not None else ""
        return (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="%.0f" height="%.0f" '
            f'viewBox="0 0 %.2f %.2f">\n' % (self.width, self.height, self.width, self.height)
            + comment
            + "\n".join(self.parts)
            + "\n</svg>\n"
        )


def _scene_bbox(scene: Scene, extra_points: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    pts = [l.polygon() for l in scene.lanelets.values()]
    pts.extend(p.reshape(-1, 2) for p in extra_points if p.size)
    stacked = np.vstack(pts)
    return stacked.min(axis=0), stacked.max(axis=0)


def render_scene_svg(
    scene: Scene,
    predictions: PredictionSet | None = None,
    key_positions: KeyPositionSet | None = None,
    trace_rows: list[dict] | None = None,
    run: dict | None = None,
) -> str:
    """Lanelets plus agent histories, ground truth, modal trajectories,
    key positions, and an optional episode trace."""
    extra = []
    if predictions is not None:
        for pred in predictions.agents.values():
            extra.append(pred.trajectories)
    if key_positions is not None:
        extra.extend(key_positions.positions.values())
    canvas = _Canvas(*_scene_bbox(scene, extra))

    for lanelet in scene.lanelets.values():
        canvas.path(lanelet.polygon(), stroke="#bbbbbb", width=0.8,
                    fill="#eeeeee", close=True)
        canvas.path(lanelet.centerline, stroke="#999999", width=0.6, dash="4,3")

    for i, agent in enumerate(scene.agents):
        color = AGENT_TRACE_COLORS[i % len(AGENT_TRACE_COLORS)]
        canvas.path(agent.history[:, 1:3], stroke=color, width=1.6)
        canvas.circle(agent.history[-1, 1:3], 3.0, fill=color)
        if agent.future_gt is not None:
            canvas.path(agent.future_gt[:, 1:3], stroke="#2ca02c", width=1.2, dash="2,2")

    if predictions is not None:
        for pred in predictions.agents.values():
            order = np.argsort(-pred.probabilities)
            for rank, mode in enumerate(order):
                canvas.path(pred.trajectories[mode],
                            stroke=MODE_COLORS[rank % len(MODE_COLORS)], width=1.2,
                            opacity=max(0.35, float(pred.probabilities[mode])))

    if key_positions is not None:
        for aid in key_positions.agent_ids():
            for mode_positions in key_positions.positions[aid]:
                for point in mode_positions:
                    canvas.circle(point, 2.2, fill="#d62728", opacity=0.8)

    if trace_rows:
        by_agent: dict[str, list] = {}
        for row in trace_rows:
            by_agent.setdefault(row["agent_id"], []).append((row["x"], row["y"]))
        for i, (aid, pts) in enumerate(sorted(by_agent.items())):
            canvas.path(np.array(pts), stroke="#d62728", width=1.4)

    return canvas.render(run=run)


def parse_trace_csv(text: str) -> list[dict]:
    """Rows of an episode trace CSV (leading `# run:` comment tolerated)."""
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        values = line.split(",")
        row = {}
        for key, value in zip(header, values):
            row[key] = value if key == "agent_id" else float(value)
        rows.append(row)
    return rows
