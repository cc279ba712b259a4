"""BEV grid, angular sector partition, ROI-to-mask projection and exact
90-degree rotations.

Angles are measured clockwise from the forward (+y) axis so that sector 0
faces the driving direction. Rotations are counterclockwise-positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry as geo

SAMPLE_HEIGHTS = (0.0, 0.5, 1.0, 1.5)
ROTATIONS = (0, 90, 180, 270)


class DegenerateInputError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BevGrid:
    height: int = 64
    width: int = 64
    resolution: float = 0.5

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.height % 2 or self.width % 2:
            raise ShapeError(f"grid dimensions must be positive and even, got {self.height}x{self.width}")
        if not self.resolution > 0:
            raise ValueError("grid resolution must be positive")

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def cell_centers(self) -> np.ndarray:
        """Ego-frame (x, y) of every cell center, shape (H, W, 2); row 0 is the far-forward edge."""
        cols = (np.arange(self.width) - self.width / 2 + 0.5) * self.resolution
        rows = (self.height / 2 - np.arange(self.height) - 0.5) * self.resolution
        xx, yy = np.meshgrid(cols, rows)
        return np.stack([xx, yy], axis=-1)

    @property
    def extent(self) -> float:
        return 0.5 * max(self.height, self.width) * self.resolution


def _check_theta(theta: float) -> int:
    k = 360.0 / theta
    if theta <= 0 or abs(k - round(k)) > 1e-9:
        raise ValueError(f"theta={theta} does not divide 360")
    return int(round(k))


def sector_indices(points, theta: float) -> np.ndarray:
    """Vectorised sector lookup for ego-frame points (..., 2)."""
    K = _check_theta(theta)
    points = np.asarray(points, dtype=float)
    alpha = np.degrees(np.arctan2(points[..., 0], points[..., 1])) % 360.0
    return (np.floor(alpha / theta).astype(np.int64)) % K


def sector_index(point, theta: float) -> int:
    x, y = float(point[0]), float(point[1])
    if x == 0.0 and y == 0.0:
        raise DegenerateInputError("the ego origin has no bearing")
    return int(sector_indices(np.array([x, y]), theta))


@dataclass(frozen=True)
class SectorPartition:
    theta: float
    K: int
    N: int
    cell_sector: np.ndarray  # (H, W) sector of each cell
    gather: np.ndarray  # (K, N) flat cell index, 0 where invalid
    valid: np.ndarray  # (K, N) bool
    cell_range: np.ndarray  # (K, N) distance of the gathered cell center, 0 where invalid
    grid: BevGrid


def build_partition(grid: BevGrid, theta: float) -> SectorPartition:
    K = _check_theta(theta)
    centers = grid.cell_centers()
    sect = sector_indices(centers, theta)
    flat = sect.ravel()
    counts = np.bincount(flat, minlength=K)
    N = int(counts.max())
    gather = np.zeros((K, N), dtype=np.int64)
    valid = np.zeros((K, N), dtype=bool)
    order = np.argsort(flat, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(flat.size) - starts[flat[order]]
    gather[flat[order], slot] = order
    valid[flat[order], slot] = True
    radius = np.hypot(centers[..., 0], centers[..., 1]).ravel()
    cell_range = np.where(valid, radius[gather], 0.0)
    return SectorPartition(theta, K, N, sect, gather, valid, cell_range, grid)


def project_rois_to_mask(rois, cameras, grid: BevGrid, heights=SAMPLE_HEIGHTS) -> np.ndarray:
    """Binary (H, W) mask of cells with a 3D sample point inside some ROI."""
    if len(heights) == 0:
        raise ValueError("at least one sampling height is required")
    mask = np.zeros(grid.height * grid.width, dtype=bool)
    if not rois:
        return mask.reshape(grid.height, grid.width).astype(np.uint8)
    centers = grid.cell_centers().reshape(-1, 2)
    z = np.asarray(heights, dtype=float)
    pts = np.concatenate(
        [np.repeat(centers[:, None, :], len(z), axis=1), np.broadcast_to(z[None, :, None], (len(centers), len(z), 1))],
        axis=-1,
    )  # (P, Z, 3)
    by_cam: dict[str, list] = {}
    for r in rois:
        by_cam.setdefault(r.camera_id, []).append(r.box)
    for cam in cameras:
        boxes = by_cam.get(cam.camera_id)
        if not boxes:
            continue
        b = np.asarray(boxes, dtype=float)
        u, v, depth = cam.project(pts)
        front = depth > 0
        u = np.where(front, u, np.nan)[..., None]
        v = np.where(front, v, np.nan)[..., None]
        hit = (u >= b[:, 0]) & (u <= b[:, 2]) & (v >= b[:, 1]) & (v <= b[:, 3])
        mask |= hit.any(axis=(1, 2))
    return mask.reshape(grid.height, grid.width).astype(np.uint8)


def mask_to_angular_label(mask, partition: SectorPartition) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != partition.cell_sector.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match partition grid {partition.cell_sector.shape}")
    label = np.zeros(partition.K, dtype=np.uint8)
    np.maximum.at(label, partition.cell_sector.ravel(), (mask.ravel() > 0).astype(np.uint8))
    return label


def _quarter_turns(r) -> int:
    r = int(r)
    if r not in ROTATIONS:
        raise ValueError(f"unsupported rotation {r}; expected one of {ROTATIONS}")
    return r // 90


def rotate_grid(values, r):
    """Counterclockwise rotation of an (H, W, ...) raster by a multiple of 90 degrees."""
    k = _quarter_turns(r)
    if k and values.shape[0] != values.shape[1]:
        raise ShapeError(f"rotation needs a square grid, got {tuple(values.shape[:2])}")
    if isinstance(values, torch.Tensor):
        return torch.rot90(values, k, dims=(0, 1))
    return np.rot90(values, k, axes=(0, 1))


def rotate_traj(traj, r):
    """Counterclockwise rotation of (..., 2) points by r in {0, 90, 180, 270}."""
    k = _quarter_turns(r)
    x, y = traj[..., 0], traj[..., 1]
    stack = torch.stack if isinstance(traj, torch.Tensor) else np.stack
    if k == 0:
        return traj.clone() if isinstance(traj, torch.Tensor) else np.array(traj, copy=True)
    if k == 1:
        return stack([-y, x], -1)
    if k == 2:
        return stack([-x, -y], -1)
    return stack([y, -x], -1)


def rot_back(traj, r):
    """Inverse of :func:`rotate_traj`."""
    return rotate_traj(traj, ((4 - _quarter_turns(r)) % 4) * 90)


VELOCITY_SCALE = 10.0
EGO_FOOTPRINT = (4.0, 1.85)
EGO_TRAIL_SECONDS = 2.0


def rotate_raster(raster, r):
    """Rotate the world a raster depicts: cells move and the velocity channels turn with them."""
    out = rotate_grid(raster, r)
    vel = rotate_traj(out[..., 1:3], r)
    if isinstance(out, torch.Tensor):
        return torch.cat([out[..., :1], vel, out[..., 3:]], dim=-1)
    return np.concatenate([out[..., :1], vel, out[..., 3:]], axis=-1)


def rasterize_world(pose, agents, boundary, grid: BevGrid, ego_speed: float | None = None) -> np.ndarray:
    """Ground-truth rasters (H, W, 4): occupancy, velocity x/y (ego axes, /10), boundary distance.

    ``agents`` are world-frame AgentState objects, ``boundary`` the world
    drivable polygon. With ``ego_speed`` the ego footprint, stretched back
    over the ground covered in the last EGO_TRAIL_SECONDS, carries the ego's
    own velocity in the velocity channels (occupancy stays 0 there). The trail
    is what tells a rotated view's forward from its backward.
    """
    centers = grid.cell_centers()
    out = np.zeros((grid.height, grid.width, 4), dtype=np.float64)
    half = grid.resolution / 2.0
    reach = grid.extent * math.sqrt(2.0) + 5.0
    if ego_speed is not None:
        back = EGO_FOOTPRINT[0] / 2 + max(float(ego_speed), 0.0) * EGO_TRAIL_SECONDS
        y, x = centers[..., 1], np.abs(centers[..., 0])
        ego = (y <= EGO_FOOTPRINT[0] / 2) & (y >= -back) & (x <= EGO_FOOTPRINT[1] / 2)
        out[ego, 2] = float(ego_speed) / VELOCITY_SCALE
    for a in agents:
        p = geo.world_to_ego(np.asarray(a.position), pose)
        if np.hypot(*p) > reach:
            continue
        u = geo.world_vec_to_ego(geo.heading_vector(a.heading), pose[2])
        n = np.array([-u[1], u[0]])
        d = centers - p
        along = np.abs(d @ u)
        across = np.abs(d @ n)
        inside = (along <= a.size[0] / 2 + half) & (across <= a.size[1] / 2 + half)
        if not inside.any():
            continue
        vel = geo.world_vec_to_ego(np.asarray(a.velocity), pose[2]) / VELOCITY_SCALE
        out[inside, 0] = 1.0
        out[inside, 1] = vel[0]
        out[inside, 2] = vel[1]
    poly = geo.world_to_ego(np.asarray(boundary), pose)
    out[..., 3] = np.clip(_local_signed_distance(centers, poly, reach) / 8.0, -1.0, 1.0)
    return out


def _local_signed_distance(points, poly, reach):
    """Signed distance using only polygon edges near the grid (parity over all edges)."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    # distance from the grid center to each edge segment
    ab0 = b - a
    t0 = np.clip(-(a * ab0).sum(-1) / np.maximum((ab0**2).sum(-1), 1e-12), 0, 1)
    near = np.hypot(*(a + t0[:, None] * ab0).T) < reach + 10.0
    flat = points.reshape(-1, 2)
    if near.any():
        aa, bb = a[near], b[near]
        ab = bb - aa
        t = np.clip(((flat[:, None] - aa[None]) * ab[None]).sum(-1) / np.maximum((ab**2).sum(-1), 1e-12), 0, 1)
        dist = np.hypot(*(aa[None] + t[..., None] * ab[None] - flat[:, None]).transpose(2, 0, 1)).min(-1)
    else:
        dist = np.full(len(flat), 10.0 * reach)
    inside = geo.points_in_polygon(flat, poly)
    return np.where(inside, dist, -dist).reshape(points.shape[:-1])
