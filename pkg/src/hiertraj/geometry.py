"""Planar geometry helpers shared by the map model, graph builder and metrics."""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap to [-pi, pi)."""
    return (theta + math.pi) % TWO_PI - math.pi


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_frame(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    """Express global points in the frame at `origin` with x-axis along `heading`."""
    return (np.atleast_2d(points) - origin) @ rotation_matrix(heading)


def from_frame(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    return np.atleast_2d(points) @ rotation_matrix(heading).T + origin


def polyline_arclengths(polyline: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each vertex, starting at 0."""
    seg = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(polyline: np.ndarray) -> float:
    return float(polyline_arclengths(polyline)[-1])


def point_at_arclength(polyline: np.ndarray, s: float) -> np.ndarray:
    """Point at arc length `s`, clamped to the polyline's extent."""
    cum = polyline_arclengths(polyline)
    s = min(max(s, 0.0), cum[-1])
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(i, len(polyline) - 2)
    seg = cum[i + 1] - cum[i]
    t = 0.0 if seg == 0.0 else (s - cum[i]) / seg
    return polyline[i] + t * (polyline[i + 1] - polyline[i])


def heading_at_arclength(polyline: np.ndarray, s: float) -> float:
    cum = polyline_arclengths(polyline)
    s = min(max(s, 0.0), cum[-1])
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(polyline) - 2)
    d = polyline[i + 1] - polyline[i]
    return math.atan2(d[1], d[0])


def resample_polyline(polyline: np.ndarray, spacing: float) -> np.ndarray:
    """Points at arc lengths 0, spacing, 2*spacing, ..., plus the endpoint."""
    total = polyline_length(polyline)
    stations = list(np.arange(0.0, total, spacing))
    if not stations or total - stations[-1] > 1e-9:
        stations.append(total)
    return np.array([point_at_arclength(polyline, s) for s in stations])


def project_to_polyline(point: np.ndarray, polyline: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Closest point on the polyline: (foot point, distance, arc length)."""
    p = np.asarray(point, dtype=float)
    a = polyline[:-1]
    b = polyline[1:]
    ab = b - a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    seg_len2 = np.where(seg_len2 == 0.0, 1.0, seg_len2)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / seg_len2, 0.0, 1.0)
    feet = a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", feet - p, feet - p)
    i = int(np.argmin(d2))
    cum = polyline_arclengths(polyline)
    s = cum[i] + t[i] * math.sqrt(seg_len2[i])
    return feet[i], math.sqrt(d2[i]), float(s)


def _on_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> bool:
    ab = b - a
    ap = p - a
    cross = ab[0] * ap[1] - ab[1] * ap[0]
    norm = math.hypot(ab[0], ab[1])
    if norm == 0.0:
        return bool(math.hypot(ap[0], ap[1]) <= tol)
    if abs(cross) / norm > tol:
        return False
    dot = ap @ ab
    return bool(-tol * norm <= dot <= norm * norm + tol * norm)


def point_in_polygon(point, polygon: np.ndarray) -> bool:
    """Crossing-number test; points on the boundary count as inside."""
    p = np.asarray(point, dtype=float)
    n = len(polygon)
    inside = False
    for i in range(n):
        a = polygon[i]
        b = polygon[(i + 1) % n]
        if _on_segment(p, a, b):
            return True
        if (a[1] > p[1]) != (b[1] > p[1]):
            x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if p[0] < x_cross:
                inside = not inside
    return inside


def offset_polyline(polyline: np.ndarray, offset: float) -> np.ndarray:
    """Parallel offset; positive moves left of travel direction."""
    d = np.diff(polyline, axis=0)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    normals = np.stack([-d[:, 1], d[:, 0]], axis=1)
    vertex_n = np.empty_like(polyline)
    vertex_n[0] = normals[0]
    vertex_n[-1] = normals[-1]
    if len(polyline) > 2:
        avg = normals[:-1] + normals[1:]
        avg /= np.linalg.norm(avg, axis=1, keepdims=True)
        vertex_n[1:-1] = avg
    return polyline + offset * vertex_n


def segments_intersect(a0, a1, b0, b1) -> bool:
    """Proper or touching intersection of segments a0a1 and b0b1."""

    def orient(p, q, r):
        val = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        if abs(val) < 1e-12:
            return 0
        return 1 if val > 0 else -1

    o1, o2 = orient(a0, a1, b0), orient(a0, a1, b1)
    o3, o4 = orient(b0, b1, a0), orient(b0, b1, a1)
    if o1 != o2 and o3 != o4:
        return True
    for p, q, r in ((a0, a1, b0), (a0, a1, b1), (b0, b1, a0), (b0, b1, a1)):
        if orient(p, q, r) == 0 and _on_segment(np.asarray(r, float), np.asarray(p, float), np.asarray(q, float)):
            return True
    return False


def polylines_cross(p1: np.ndarray, p2: np.ndarray) -> bool:
    for i in range(len(p1) - 1):
        for j in range(len(p2) - 1):
            if segments_intersect(p1[i], p1[i + 1], p2[j], p2[j + 1]):
                return True
    return False
