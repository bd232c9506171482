"""Planar geometry helpers: oriented rectangles, segment distances, polygons.

World frame convention: x points east, y points south (screen-like), and
headings grow clockwise from +x. A positive steering command therefore turns
the vehicle to the right.
"""

from __future__ import annotations

import math

import numpy as np


def rect_corners(x: float, y: float, heading: float, half_length: float, half_width: float) -> np.ndarray:
    """Return the 4 corners (4, 2) of an oriented rectangle, counter-ordered."""
    c, s = math.cos(heading), math.sin(heading)
    fx, fy = c * half_length, s * half_length
    # right-hand normal in the y-down frame is heading + 90deg
    rx, ry = -s * half_width, c * half_width
    return np.array(
        [
            [x + fx + rx, y + fy + ry],
            [x + fx - rx, y + fy - ry],
            [x - fx - rx, y - fy - ry],
            [x - fx + rx, y - fy + ry],
        ]
    )


def _project(corners: np.ndarray, axis: tuple[float, float]) -> tuple[float, float]:
    d = corners[:, 0] * axis[0] + corners[:, 1] * axis[1]
    return float(d.min()), float(d.max())


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given as (4, 2) corners.

    Touching edges (zero-measure contact) do not count as overlap.
    """
    for poly in (a, b):
        for i in range(2):
            ex = poly[i + 1, 0] - poly[i, 0]
            ey = poly[i + 1, 1] - poly[i, 1]
            axis = (-ey, ex)
            amin, amax = _project(a, axis)
            bmin, bmax = _project(b, axis)
            if amax <= bmin or bmax <= amin:
                return False
    return True


def points_in_rect(
    points: np.ndarray, x: float, y: float, heading: float, half_length: float, half_width: float
) -> np.ndarray:
    """Boolean mask of which (N, 2) points lie inside the oriented rectangle."""
    c, s = math.cos(heading), math.sin(heading)
    dx = points[..., 0] - x
    dy = points[..., 1] - y
    lon = dx * c + dy * s
    lat = -dx * s + dy * c
    return (np.abs(lon) <= half_length) & (np.abs(lat) <= half_width)


def segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from points (N, 2) to segments a->b (P, 2); returns (N, P)."""
    ab = b - a
    len2 = np.einsum("pi,pi->p", ab, ab)
    len2 = np.where(len2 > 0, len2, 1.0)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("npi,pi->np", ap, ab) / len2, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    diff = points[:, None, :] - closest
    return np.sqrt(np.einsum("npi,npi->np", diff, diff))


def points_in_convex_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Inside test for a convex polygon of either winding; boundary counts as inside."""
    nxt = np.roll(polygon, -1, axis=0)
    edge = nxt - polygon
    rel = points[:, None, :] - polygon[None, :, :]
    cross = edge[None, :, 0] * rel[..., 1] - edge[None, :, 1] * rel[..., 0]
    return np.all(cross >= -1e-12, axis=1) | np.all(cross <= 1e-12, axis=1)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a polyline at (roughly) uniform arc-length spacing, keeping both ends."""
    seg = np.diff(points, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    keep = lengths > 1e-9
    if not np.any(keep):
        return points[:1].copy()
    pts = np.vstack([points[:1], points[1:][keep]])
    lengths = lengths[keep]
    s = np.concatenate([[0.0], np.cumsum(lengths)])
    n = max(int(math.ceil(s[-1] / spacing)), 1)
    q = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(q, s, pts[:, 0]), np.interp(q, s, pts[:, 1])], axis=1)
