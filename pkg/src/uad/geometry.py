"""Planar geometry shared by the scenario generator and the evaluators.

Frames
------
World frame: standard math axes, headings are counterclockwise from +X.
Ego frame: x points to the ego's right, y points forward.
"""

from __future__ import annotations

import math

import numpy as np


def world_to_ego(points, pose):
    """Transform world points (..., 2) into the ego frame of ``pose = (x, y, yaw)``."""
    points = np.asarray(points, dtype=float)
    px, py, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    dx = points[..., 0] - px
    dy = points[..., 1] - py
    ex = dx * s - dy * c
    ey = dx * c + dy * s
    return np.stack([ex, ey], axis=-1)


def ego_to_world(points, pose):
    points = np.asarray(points, dtype=float)
    px, py, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    ex = points[..., 0]
    ey = points[..., 1]
    wx = px + ex * s + ey * c
    wy = py - ex * c + ey * s
    return np.stack([wx, wy], axis=-1)


def world_vec_to_ego(vecs, yaw):
    """Rotate free vectors (no translation) from world into ego axes."""
    vecs = np.asarray(vecs, dtype=float)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([vecs[..., 0] * s - vecs[..., 1] * c, vecs[..., 0] * c + vecs[..., 1] * s], axis=-1)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def box_corners(center, direction, length, width):
    """Corners of an oriented rectangle, counterclockwise.

    ``direction`` is the unit vector along the length axis. Works for
    batched inputs: center (..., 2), direction (..., 2), length/width (...).
    """
    center = np.asarray(center, dtype=float)
    u = np.asarray(direction, dtype=float)
    n = np.stack([-u[..., 1], u[..., 0]], axis=-1)
    hl = (np.asarray(length, dtype=float) / 2.0)[..., None]
    hw = (np.asarray(width, dtype=float) / 2.0)[..., None]
    return np.stack(
        [
            center + u * hl - n * hw,
            center + u * hl + n * hw,
            center - u * hl + n * hw,
            center - u * hl - n * hw,
        ],
        axis=-2,
    )


def heading_vector(yaw):
    yaw = np.asarray(yaw, dtype=float)
    return np.stack([np.cos(yaw), np.sin(yaw)], axis=-1)


def rects_overlap(a, b):
    """Vectorised separating-axis test for convex quadrilaterals.

    ``a`` has shape (..., 4, 2) and ``b`` broadcasts against it. Touching
    boundaries count as overlap.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    edges = np.concatenate([np.roll(a, -1, axis=-2) - a, np.roll(b, -1, axis=-2) - b], axis=-2)
    axes = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)  # (..., 8, 2)
    pa = np.einsum("...kd,...ad->...ak", a, axes)  # (..., 8 axes, 4 corners)
    pb = np.einsum("...kd,...ad->...ak", b, axes)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~separated.any(-1)


def any_overlap(box, others):
    """True if ``box`` (4, 2) overlaps any of ``others`` (M, 4, 2)."""
    others = np.asarray(others, dtype=float)
    if others.size == 0:
        return False
    return bool(rects_overlap(np.asarray(box)[None], others).any())


def polygon_area(poly):
    poly = np.asarray(poly, dtype=float)
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def validate_polygon(poly):
    poly = np.asarray(poly, dtype=float)
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise ValueError(f"degenerate polygon with shape {poly.shape}")
    if abs(polygon_area(poly)) < 1e-9:
        raise ValueError("degenerate polygon with zero area")
    return poly


def points_in_polygon(points, poly):
    """Even-odd ray casting; ``points`` (..., 2), ``poly`` (V, 2)."""
    points = np.asarray(points, dtype=float)
    poly = np.asarray(poly, dtype=float)
    px = points[..., 0][..., None]
    py = points[..., 1][..., None]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    crossings = straddle & (px < xc)
    return (crossings.sum(-1) % 2) == 1


def _segments_cross(p0, p1, q0, q1):
    """Proper or touching intersection of segment sets (broadcast)."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1 = orient(q0, q1, p0)
    d2 = orient(q0, q1, p1)
    d3 = orient(p0, p1, q0)
    d4 = orient(p0, p1, q1)
    return (d1 * d2 <= 0) & (d3 * d4 <= 0) & ~((d1 == 0) & (d2 == 0) & (d3 == 0) & (d4 == 0))


def rect_inside_polygon(rect, poly):
    """True iff the convex quadrilateral ``rect`` (4, 2) lies entirely inside ``poly``."""
    rect = np.asarray(rect, dtype=float)
    poly = np.asarray(poly, dtype=float)
    if not points_in_polygon(rect, poly).all():
        return False
    r0, r1 = rect, np.roll(rect, -1, axis=0)
    q0, q1 = poly, np.roll(poly, -1, axis=0)
    if _segments_cross(r0[:, None], r1[:, None], q0[None], q1[None]).any():
        return False
    return True


def signed_distance_to_polygon(points, poly):
    """Distance to the polygon boundary, positive inside, negative outside."""
    points = np.asarray(points, dtype=float)
    poly = np.asarray(poly, dtype=float)
    flat = points.reshape(-1, 2)
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    denom = np.maximum((ab**2).sum(-1), 1e-12)
    ap = flat[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((flat[:, None, :] - closest) ** 2).sum(-1)).min(-1)
    inside = points_in_polygon(flat, poly)
    return np.where(inside, dist, -dist).reshape(points.shape[:-1])
