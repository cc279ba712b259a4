"""Procedural driving scenes: route corridor, scripted agents, expert driver,
camera rig and synthetic 2D detections.

Scenes are plain frozen dataclasses of tuples so that equality is
field-for-field and the JSON-lines round trip is lossless.
"""

from __future__ import annotations

import bisect
import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

CATEGORIES = ("vehicle", "pedestrian", "barrier")
COMMANDS = ("turn_left", "turn_right", "go_straight")
AGENT_HEIGHTS = {"vehicle": 1.5, "pedestrian": 1.7, "barrier": 1.0}
EGO_SIZE = (4.0, 1.85)
DT = 0.5
SCHEMA_VERSION = 1


class InfeasibleConfigError(RuntimeError):
    """No collision-free expert route was found within the retry budget."""


class DatasetParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class AgentState:
    agent_id: int
    position: tuple[float, float]
    heading: float
    size: tuple[float, float]  # (length, width)
    velocity: tuple[float, float]
    category: str

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValueError(f"agent {self.agent_id}: non-positive size {self.size}")
        if self.category not in CATEGORIES:
            raise ValueError(f"agent {self.agent_id}: unknown category {self.category!r}")

    @property
    def height(self) -> float:
        return AGENT_HEIGHTS[self.category]

    def corners(self) -> np.ndarray:
        return geo.box_corners(self.position, geo.heading_vector(self.heading), self.size[0], self.size[1])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera mounted on the ego; ``yaw`` is degrees counterclockwise from forward."""

    camera_id: str
    x: float
    y: float
    yaw: float
    hfov: float
    width: int
    height: int
    mount_height: float = 1.5

    def __post_init__(self):
        if not 0 < self.hfov < 180:
            raise ValueError(f"camera {self.camera_id}: hfov must lie in (0, 180), got {self.hfov}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera {self.camera_id}: bad image size")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.hfov) / 2.0)

    def to_camera(self, points):
        """Ego-frame 3D points (..., 3) -> (depth, lateral, up) in camera axes."""
        points = np.asarray(points, dtype=float)
        psi = math.radians(self.yaw)
        fwd = (-math.sin(psi), math.cos(psi))
        right = (math.cos(psi), math.sin(psi))
        rx = points[..., 0] - self.x
        ry = points[..., 1] - self.y
        depth = rx * fwd[0] + ry * fwd[1]
        lat = rx * right[0] + ry * right[1]
        up = points[..., 2] - self.mount_height
        return depth, lat, up

    def project(self, points):
        """Returns pixel (u, v) and depth; pixels are meaningless where depth <= 0."""
        depth, lat, up = self.to_camera(points)
        f = self.focal
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.width / 2.0 + f * lat / depth
            v = self.height / 2.0 - f * up / depth
        return u, v, depth


def default_cameras(hfov: float = 100.0, width: int = 256, height: int = 160) -> tuple[Camera, ...]:
    return (
        Camera("front", 0.0, 1.0, 0.0, hfov, width, height),
        Camera("left", -0.9, 0.0, 90.0, hfov, width, height),
        Camera("back", 0.0, -1.0, 180.0, hfov, width, height),
        Camera("right", 0.9, 0.0, 270.0, hfov, width, height),
    )


@dataclass(frozen=True)
class Roi:
    camera_id: str
    box: tuple[float, float, float, float]
    confidence: float
    agent_id: int = -1  # -1 marks injected clutter

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"empty roi box {self.box}")


@dataclass(frozen=True)
class RoiNoise:
    miss_rate: float = 0.1
    conf_range: tuple[float, float] = (0.2, 1.0)
    jitter_px: float = 2.0
    oversize_rate: float = 0.05
    conf_threshold: float = 0.35
    rule_filter: bool = True


RAW_NOISE_FIELDS = {"conf_threshold": 0.0, "rule_filter": False}


@dataclass(frozen=True)
class ScenarioConfig:
    frames: int = 16
    horizon: int = 6
    road_width: float = 8.0
    v_max: float = 7.0
    a_lat_max: float = 2.0
    agent_count: tuple[int, int] = (0, 8)
    route_mix: tuple[float, float, float] = (0.5, 0.25, 0.25)  # straight, left, right
    p_lead: float = 0.6
    lead_speed: tuple[float, float] = (0.0, 5.0)
    lead_gap: tuple[float, float] = (8.0, 30.0)
    init_lateral: float = 1.2
    init_heading_deg: float = 8.0
    init_speed: tuple[float, float] = (0.5, 1.0)  # fraction of v_max
    turn_radius: tuple[float, float] = (12.0, 25.0)
    turn_angle_deg: tuple[float, float] = (50.0, 90.0)
    roi_noise: RoiNoise = field(default_factory=RoiNoise)
    cameras: tuple[Camera, ...] = field(default_factory=default_cameras)
    max_retries: int = 50
    command_threshold_deg: float = 25.0


@dataclass(frozen=True)
class Scene:
    scene_id: str
    seed: int
    dt: float
    ego_poses: tuple  # per frame (x, y, yaw), world frame
    ego_status: tuple  # per frame (speed, yaw_rate)
    commands: tuple  # per frame, one of COMMANDS
    agents: tuple  # per frame, tuple of AgentState (world frame)
    route: tuple  # centerline polyline (x, y), world frame
    boundary: tuple  # closed drivable polygon (x, y), world frame
    cameras: tuple
    rois: tuple  # per frame, tuple of raw Roi (no threshold, no rule filter)

    @property
    def num_frames(self) -> int:
        return len(self.ego_poses)

    def pose(self, frame: int) -> tuple[float, float, float]:
        return self.ego_poses[frame]

    def ego_track(self) -> np.ndarray:
        return np.asarray(self.ego_poses, dtype=float)


class Route:
    """Arc-length parameterised centerline."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        seg = np.diff(pts, axis=0)
        seglen = np.hypot(seg[:, 0], seg[:, 1])
        self.points = pts
        self.s = np.concatenate([[0.0], np.cumsum(seglen)])
        self.length = float(self.s[-1])
        heading = np.arctan2(seg[:, 1], seg[:, 0])
        self.seg_heading = heading
        self.heading_at_points = np.concatenate([heading, heading[-1:]])
        dpsi = geo.wrap_angle(np.diff(heading))
        kappa = np.abs(dpsi) / np.maximum(seglen[1:], 1e-9)
        self.curvature = np.concatenate([[0.0], kappa, [0.0]])
        self.s_list = self.s.tolist()
        self.pts_list = [tuple(p) for p in pts.tolist()]
        self.heading_list = heading.tolist()

    def point_scalar(self, s: float):
        s = min(max(s, 0.0), self.length)
        i = min(bisect.bisect_right(self.s_list, s) - 1, len(self.s_list) - 2)
        t = (s - self.s_list[i]) / max(self.s_list[i + 1] - self.s_list[i], 1e-12)
        (x0, y0), (x1, y1) = self.pts_list[i], self.pts_list[i + 1]
        return x0 + t * (x1 - x0), y0 + t * (y1 - y0), self.heading_list[i]

    def point(self, s):
        s = np.clip(s, 0.0, self.length)
        return np.stack([np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])], axis=-1)

    def heading(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg_heading) - 1)
        return self.seg_heading[idx]

    def normal(self, s):
        h = self.heading(s)
        return np.stack([-np.sin(h), np.cos(h)], axis=-1)  # left of travel

    def offset_point(self, s, lateral):
        """Point displaced ``lateral`` meters to the left of the centerline."""
        return self.point(s) + np.asarray(lateral)[..., None] * self.normal(s)

    def max_curvature(self, s0, s1):
        mask = (self.s >= s0) & (self.s <= s1)
        return float(self.curvature[mask].max()) if mask.any() else 0.0

    def project(self, xy, hint: float | None = None, window: float = 15.0) -> float:
        """Arc length of the closest centerline point (searched near ``hint``)."""
        xy = np.asarray(xy, dtype=float)
        if hint is None:
            lo, hi = 0, len(self.points) - 1
        else:
            lo = max(int(np.searchsorted(self.s, hint - window)) - 1, 0)
            hi = min(int(np.searchsorted(self.s, hint + window)) + 1, len(self.points) - 1)
        a = self.points[lo:hi]
        b = self.points[lo + 1 : hi + 1]
        ab = b - a
        t = np.clip(((xy - a) * ab).sum(-1) / np.maximum((ab**2).sum(-1), 1e-12), 0.0, 1.0)
        d = np.hypot(*(a + t[:, None] * ab - xy).T)
        i = int(np.argmin(d))
        return float(self.s[lo + i] + t[i] * (self.s[lo + i + 1] - self.s[lo + i]))

    def boundary_polygon(self, width: float, step: float = 1.0) -> np.ndarray:
        s = np.arange(0.0, self.length, step)
        s = np.append(s, self.length)
        left = self.offset_point(s, np.full_like(s, width / 2.0))
        right = self.offset_point(s, np.full_like(s, -width / 2.0))
        return np.concatenate([right, left[::-1]], axis=0)


def build_centerline(start, yaw, pieces, ds: float = 0.5) -> np.ndarray:
    """``pieces`` is a list of (length, signed_curvature) segments."""
    x, y = start
    pts = [(x, y)]
    for length, kappa in pieces:
        n = max(int(math.ceil(length / ds)), 1)
        step = length / n
        for _ in range(n):
            if abs(kappa) < 1e-12:
                x += step * math.cos(yaw)
                y += step * math.sin(yaw)
            else:
                new_yaw = yaw + kappa * step
                x += (math.sin(new_yaw) - math.sin(yaw)) / kappa
                y += (math.cos(yaw) - math.cos(new_yaw)) / kappa
                yaw = new_yaw
            pts.append((x, y))
    return np.asarray(pts)


@dataclass
class _Track:
    """Scripted agent moving along a lateral offset of the centerline."""

    agent_id: int
    category: str
    size: tuple[float, float]
    s0: float
    lateral: float
    speed: float  # signed, along the centerline

    def state(self, route: Route, t: float) -> AgentState:
        s = min(max(self.s0 + self.speed * t, 0.0), route.length)
        moving = 0.0 < s < route.length and self.speed != 0.0
        cx, cy, h = route.point_scalar(s)
        pos = (cx - self.lateral * math.sin(h), cy + self.lateral * math.cos(h))
        if self.speed < 0:
            h = float(geo.wrap_angle(h + math.pi))
        spd = abs(self.speed) if moving else 0.0
        return AgentState(
            agent_id=self.agent_id,
            position=(float(pos[0]), float(pos[1])),
            heading=h,
            size=self.size,
            velocity=(spd * math.cos(h), spd * math.sin(h)),
            category=self.category,
        )


# expert driver constants
WHEELBASE = 2.7
MAX_STEER = 0.6
SUBSTEPS = 10
IDM_ACCEL = 1.5
IDM_DECEL = 2.0
IDM_GAP = 2.5
IDM_HEADWAY = 1.2
MAX_BRAKE = 6.0


def pure_pursuit_steer(pose, target_xy, wheelbase: float = WHEELBASE) -> float:
    """Steering angle toward a world-frame target point (positive = left)."""
    ex, ey = geo.world_to_ego(np.asarray(target_xy), pose)
    l2 = max(ex * ex + ey * ey, 1e-6)
    kappa = -2.0 * ex / l2
    return float(np.clip(math.atan(wheelbase * kappa), -MAX_STEER, MAX_STEER))


def bicycle_step(state, steer: float, accel: float, dt: float):
    x, y, yaw, v = state
    x += v * math.cos(yaw) * dt
    y += v * math.sin(yaw) * dt
    yaw += v / WHEELBASE * math.tan(steer) * dt
    v = max(v + accel * dt, 0.0)
    return (x, y, float(geo.wrap_angle(yaw)), v)


class ExpertDriver:
    """Pure-pursuit lane keeping with curvature-limited IDM speed control."""

    def __init__(self, route: Route, config: ScenarioConfig):
        self.route = route
        self.config = config
        self.s = 0.0

    def reset(self, s: float):
        self.s = s

    def desired_speed(self, s: float, v: float) -> float:
        cfg = self.config
        kappa = self.route.max_curvature(s, s + 12.0 + 2.5 * v)
        v_curve = math.sqrt(cfg.a_lat_max / kappa) if kappa > 1e-6 else cfg.v_max
        return min(cfg.v_max, v_curve)

    def control(self, state, agents: list[AgentState], t: float):
        x, y, yaw, v = state
        self.s = self.route.project((x, y), hint=self.s)
        lookahead = max(4.0, 1.2 * v)
        target = self.route.point(self.s + lookahead)
        steer = pure_pursuit_steer((x, y, yaw), target)
        v_des = max(self.desired_speed(self.s, v), 0.1)
        accel = IDM_ACCEL * (1.0 - (v / v_des) ** 4)
        lead = self._lead(agents)
        if lead is not None:
            gap, v_lead = lead
            s_star = IDM_GAP + v * IDM_HEADWAY + v * (v - v_lead) / (2.0 * math.sqrt(IDM_ACCEL * IDM_DECEL))
            accel -= IDM_ACCEL * (max(s_star, 0.0) / max(gap, 0.1)) ** 2
        if self.s >= self.route.length - 2.0:
            accel = -MAX_BRAKE
        return steer, float(np.clip(accel, -MAX_BRAKE, IDM_ACCEL))

    def _lead(self, agents):
        """Nearest in-corridor agent ahead: (bumper gap, speed along route)."""
        best = None
        half = self.config.road_width / 4.0
        for a in agents:
            sa = self.route.project(a.position, hint=self.s, window=60.0)
            if sa <= self.s:
                continue
            c = self.route.point(sa)
            lat = math.hypot(a.position[0] - c[0], a.position[1] - c[1])
            if lat > half + a.size[1] / 2.0:
                continue
            gap = sa - self.s - (a.size[0] + EGO_SIZE[0]) / 2.0
            h = self.route.heading(sa)
            v_along = a.velocity[0] * math.cos(h) + a.velocity[1] * math.sin(h)
            if best is None or gap < best[0]:
                best = (gap, v_along)
        return best


def _sample_route(rng: np.random.Generator, config: ScenarioConfig, s_start: float, travel: float):
    kind = rng.choice(3, p=np.asarray(config.route_mix) / np.sum(config.route_mix))
    yaw0 = float(rng.uniform(-math.pi, math.pi))
    lead_in = float(rng.uniform(s_start + 2.0, s_start + 0.6 * travel + 5.0))
    pieces = [(lead_in, 0.0)]
    if kind != 0:
        radius = float(rng.uniform(*config.turn_radius))
        angle = math.radians(float(rng.uniform(*config.turn_angle_deg)))
        sign = 1.0 if kind == 1 else -1.0
        pieces.append((radius * angle, sign / radius))
    tail = s_start + travel + 45.0 - sum(p[0] for p in pieces)
    pieces.append((max(tail, 45.0), 0.0))
    origin = rng.uniform(-50.0, 50.0, size=2)
    return Route(build_centerline(tuple(origin), yaw0, pieces)), int(kind)


def _sample_tracks(rng, config: ScenarioConfig, route: Route, s_start: float, travel: float):
    n = int(rng.integers(config.agent_count[0], config.agent_count[1] + 1))
    tracks = []
    half = config.road_width / 2.0
    for i in range(n):
        if i == 0 and rng.random() < config.p_lead:
            spd = float(rng.uniform(*config.lead_speed))
            if spd < 0.5:
                spd = 0.0
            s0 = s_start + float(rng.uniform(*config.lead_gap))
            tracks.append(_Track(i, "vehicle", (4.5, 1.9), s0, 0.0, spd))
            continue
        cat = rng.choice(["vehicle", "pedestrian", "barrier"], p=[0.35, 0.4, 0.25])
        side = 1.0 if rng.random() < 0.5 else -1.0
        s0 = float(rng.uniform(0.0, s_start + travel + 25.0))
        if cat == "vehicle":
            size = (4.5, 1.9)
            lateral = side * (half + float(rng.uniform(1.6, 3.0)))
            speed = 0.0
        elif cat == "pedestrian":
            size = (0.6, 0.6)
            lateral = side * (half + float(rng.uniform(0.8, 3.0)))
            speed = float(rng.uniform(-1.4, 1.4))
        else:
            size = (2.0, 0.5)
            lateral = side * (half + float(rng.uniform(0.5, 1.5)))
            speed = 0.0
        tracks.append(_Track(i, str(cat), size, s0, lateral, speed))
    return tracks


def _commands(yaws: np.ndarray, horizon: int, threshold_deg: float) -> tuple[str, ...]:
    out = []
    n = len(yaws)
    for f in range(n):
        g = min(f + horizon, n - 1)
        dpsi = math.degrees(float(geo.wrap_angle(yaws[g] - yaws[f])))
        if dpsi > threshold_deg:
            out.append("turn_left")
        elif dpsi < -threshold_deg:
            out.append("turn_right")
        else:
            out.append("go_straight")
    return tuple(out)


def ego_box(pose) -> np.ndarray:
    x, y, yaw = pose
    return geo.box_corners((x, y), geo.heading_vector(yaw), *EGO_SIZE)


def expert_is_safe(poses, agents_per_frame) -> bool:
    for pose, agents in zip(poses, agents_per_frame):
        if not agents:
            continue
        boxes = np.stack([a.corners() for a in agents])
        if geo.any_overlap(ego_box(pose), boxes):
            return False
    return True


def simulate_expert(route: Route, tracks, config: ScenarioConfig, init_state, s_init: float, frames: int):
    """Roll the expert forward; returns per-frame poses, status and agents."""
    driver = ExpertDriver(route, config)
    driver.reset(s_init)
    state = init_state
    h = DT / SUBSTEPS
    poses, status, agents_per_frame = [], [], []
    yaw_rate = 0.0
    for f in range(frames):
        t = f * DT
        agents = [tr.state(route, t) for tr in tracks]
        poses.append((state[0], state[1], state[2]))
        status.append((state[3], yaw_rate))
        agents_per_frame.append(tuple(agents))
        yaw_before = state[2]
        for k in range(SUBSTEPS):
            tk = t + k * h
            live = [tr.state(route, tk) for tr in tracks] if k else agents
            steer, accel = driver.control(state, live, tk)
            state = bicycle_step(state, steer, accel, h)
        yaw_rate = float(geo.wrap_angle(state[2] - yaw_before)) / DT
    return poses, status, agents_per_frame


def generate_scene(config: ScenarioConfig, seed: int, scene_id: str | None = None) -> Scene:
    """Deterministic scene for ``(config, seed)``; raises InfeasibleConfigError."""
    rng = np.random.default_rng(seed)
    travel = config.v_max * DT * config.frames
    for _ in range(config.max_retries):
        s_start = 8.0
        route, _ = _sample_route(rng, config, s_start, travel)
        tracks = _sample_tracks(rng, config, route, s_start, travel)
        lateral = float(rng.uniform(-config.init_lateral, config.init_lateral)) if config.init_lateral > 0 else 0.0
        dpsi = math.radians(float(rng.uniform(-config.init_heading_deg, config.init_heading_deg))) if config.init_heading_deg > 0 else 0.0
        v0 = config.v_max * float(rng.uniform(*config.init_speed))
        p0 = route.offset_point(np.array(s_start), np.array(lateral))
        yaw0 = float(route.heading(s_start)) + dpsi
        init_state = (float(p0[0]), float(p0[1]), yaw0, v0)
        poses, status, agents = simulate_expert(route, tracks, config, init_state, s_start, config.frames)
        if not expert_is_safe(poses, agents):
            continue
        boundary = route.boundary_polygon(config.road_width)
        yaws = np.asarray([p[2] for p in poses])
        scene = Scene(
            scene_id=scene_id if scene_id is not None else f"scene-{seed}",
            seed=int(seed),
            dt=DT,
            ego_poses=tuple(tuple(float(v) for v in p) for p in poses),
            ego_status=tuple((float(a), float(b)) for a, b in status),
            commands=_commands(yaws, config.horizon, config.command_threshold_deg),
            agents=tuple(agents),
            route=tuple((float(x), float(y)) for x, y in route.points),
            boundary=tuple((float(x), float(y)) for x, y in boundary),
            cameras=tuple(config.cameras),
            rois=(),
        )
        raw = dataclasses.replace(config.roi_noise, **RAW_NOISE_FIELDS)
        rois = tuple(tuple(r for cam_rois in render_rois(scene, f, raw) for r in cam_rois) for f in range(scene.num_frames))
        return dataclasses.replace(scene, rois=rois)
    raise InfeasibleConfigError(f"no collision-free expert route after {config.max_retries} attempts (seed {seed})")


def expert_waypoints(scene: Scene, frame: int, T: int) -> np.ndarray:
    """Future expert positions in the ego frame at ``frame``, shape (T, 2)."""
    if frame < 0 or T < 1 or frame + T >= scene.num_frames:
        raise IndexError(f"frame {frame} with horizon {T} exceeds {scene.num_frames} frames")
    track = scene.ego_track()
    return geo.world_to_ego(track[frame + 1 : frame + T + 1, :2], scene.ego_poses[frame])


def agents_in_ego(scene: Scene, frame: int, at_frame: int | None = None) -> list[AgentState]:
    """Agents at ``at_frame`` expressed in the ego frame of ``frame``."""
    pose = scene.ego_poses[frame]
    out = []
    for a in scene.agents[frame if at_frame is None else at_frame]:
        p = geo.world_to_ego(np.asarray(a.position), pose)
        d = geo.world_vec_to_ego(geo.heading_vector(a.heading), pose[2])
        v = geo.world_vec_to_ego(np.asarray(a.velocity), pose[2])
        out.append(
            dataclasses.replace(
                a,
                position=(float(p[0]), float(p[1])),
                heading=float(math.atan2(d[1], d[0])),
                velocity=(float(v[0]), float(v[1])),
            )
        )
    return out


# --- 2D detections -------------------------------------------------------

_BOX_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]
NEAR_PLANE = 0.1


def agent_box_3d(agent: AgentState) -> np.ndarray:
    """Eight corners (bottom ring then top ring) of an ego-frame agent."""
    foot = agent.corners()
    bottom = np.concatenate([foot, np.zeros((4, 1))], axis=1)
    top = np.concatenate([foot, np.full((4, 1), agent.height)], axis=1)
    return np.concatenate([bottom, top], axis=0)


def project_box(camera: Camera, corners3d: np.ndarray):
    """Image-clipped bounding box of a 3D box, or None if not visible."""
    depth, lat, up = camera.to_camera(corners3d)
    pts = []
    for i, j in _BOX_EDGES:
        for k in (i, j):
            if depth[k] >= NEAR_PLANE:
                pts.append((depth[k], lat[k], up[k]))
        if (depth[i] - NEAR_PLANE) * (depth[j] - NEAR_PLANE) < 0:
            t = (NEAR_PLANE - depth[i]) / (depth[j] - depth[i])
            pts.append((NEAR_PLANE, lat[i] + t * (lat[j] - lat[i]), up[i] + t * (up[j] - up[i])))
    if not pts:
        return None
    p = np.asarray(pts)
    f = camera.focal
    u = camera.width / 2.0 + f * p[:, 1] / p[:, 0]
    v = camera.height / 2.0 - f * p[:, 2] / p[:, 0]
    x0, x1 = max(u.min(), 0.0), min(u.max(), float(camera.width))
    y0, y1 = max(v.min(), 0.0), min(v.max(), float(camera.height))
    if x0 >= x1 or y0 >= y1:
        return None
    return (float(x0), float(y0), float(x1), float(y1))


def filter_rois(rois, cameras, conf_threshold: float, rule_filter: bool):
    """Confidence threshold plus the half-image size rule."""
    cams = {c.camera_id: c for c in cameras}
    out = []
    for r in rois:
        if r.confidence < conf_threshold:
            continue
        if rule_filter:
            cam = cams[r.camera_id]
            if (r.box[2] - r.box[0]) > cam.width / 2.0 or (r.box[3] - r.box[1]) > cam.height / 2.0:
                continue
        out.append(r)
    return out


def render_rois(scene: Scene, frame: int, noise: RoiNoise, rng: np.random.Generator | None = None):
    """Per-camera detections at ``frame`` (list of lists, camera order)."""
    if rng is None:
        rng = np.random.default_rng([scene.seed, frame, 0x2D])
    agents = agents_in_ego(scene, frame)
    per_camera = []
    for cam in scene.cameras:
        rois = []
        for a in agents:
            box = project_box(cam, agent_box_3d(a))
            miss = rng.random()
            conf = float(rng.uniform(*noise.conf_range))
            jit = rng.normal(0.0, 1.0, size=4) * noise.jitter_px
            if box is None or miss < noise.miss_rate:
                continue
            if noise.jitter_px > 0:
                x0, y0, x1, y1 = box
                x0, x1 = sorted((np.clip(x0 + jit[0], 0, cam.width), np.clip(x1 + jit[2], 0, cam.width)))
                y0, y1 = sorted((np.clip(y0 + jit[1], 0, cam.height), np.clip(y1 + jit[3], 0, cam.height)))
                if x1 - x0 < 1e-6 or y1 - y0 < 1e-6:
                    continue
                box = (float(x0), float(y0), float(x1), float(y1))
            rois.append(Roi(cam.camera_id, box, conf, a.agent_id))
        if rng.random() < noise.oversize_rate:
            w = float(rng.uniform(0.55, 0.95)) * cam.width
            h = float(rng.uniform(0.3, 0.95)) * cam.height
            x0 = float(rng.uniform(0, cam.width - w))
            y0 = float(rng.uniform(0, cam.height - h))
            rois.append(Roi(cam.camera_id, (x0, y0, x0 + w, y0 + h), float(rng.uniform(*noise.conf_range)), -1))
        per_camera.append(filter_rois(rois, scene.cameras, noise.conf_threshold, noise.rule_filter))
    return per_camera


# --- dataset file --------------------------------------------------------

def _scene_to_record(scene: Scene) -> dict:
    rec = {"v": SCHEMA_VERSION}
    rec.update(dataclasses.asdict(scene))
    return rec


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _record_to_scene(rec: dict) -> Scene:
    if rec.get("v") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {rec.get('v')!r}")
    agents = tuple(
        tuple(
            AgentState(
                agent_id=int(a["agent_id"]),
                position=_tuplify(a["position"]),
                heading=a["heading"],
                size=_tuplify(a["size"]),
                velocity=_tuplify(a["velocity"]),
                category=a["category"],
            )
            for a in frame
        )
        for frame in rec["agents"]
    )
    cameras = tuple(Camera(**c) for c in rec["cameras"])
    rois = tuple(
        tuple(Roi(r["camera_id"], _tuplify(r["box"]), r["confidence"], int(r["agent_id"])) for r in frame)
        for frame in rec["rois"]
    )
    return Scene(
        scene_id=rec["scene_id"],
        seed=int(rec["seed"]),
        dt=rec["dt"],
        ego_poses=_tuplify(rec["ego_poses"]),
        ego_status=_tuplify(rec["ego_status"]),
        commands=_tuplify(rec["commands"]),
        agents=agents,
        route=_tuplify(rec["route"]),
        boundary=_tuplify(rec["boundary"]),
        cameras=cameras,
        rois=rois,
    )


def save_dataset(scenes, path) -> None:
    """One JSON record per line; written to a temp file and renamed."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".jsonl")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for scene in scenes:
                fh.write(json.dumps(_scene_to_record(scene), separators=(",", ":")))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                scenes.append(_record_to_scene(rec))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(line_no, f"malformed scene record: {exc}") from exc
    return scenes


def generate_dataset(config: ScenarioConfig, seeds) -> list[Scene]:
    return [generate_scene(config, int(s)) for s in seeds]
