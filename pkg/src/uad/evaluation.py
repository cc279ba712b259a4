"""Open-loop planning metrics and the closed-loop driving harness."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry as geo
from .bevgeo import rasterize_world
from .model import COMMANDS, command_index
from .scenario import (
    DT,
    EGO_SIZE,
    MAX_BRAKE,
    SUBSTEPS,
    ExpertDriver,
    Route,
    ScenarioConfig,
    agents_in_ego,
    bicycle_step,
    ego_box,
    pure_pursuit_steer,
)

HORIZONS = {"1s": 2, "2s": 4, "3s": 6}


class HorizonError(IndexError):
    pass


# --- L2 ------------------------------------------------------------------------


def l2_per_step(pred, gt) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1])


def l2_noavg(pred, gt, step: int):
    """Distance at exactly waypoint ``step`` (1-based, 0.5 s cadence)."""
    d = l2_per_step(pred, gt)
    if not 1 <= step <= d.shape[-1]:
        raise HorizonError(f"horizon step {step} outside 1..{d.shape[-1]}")
    return d[..., step - 1]


def l2_temavg(per_step, step: int):
    """Mean of the per-step values from the first waypoint through ``step``."""
    per_step = np.asarray(per_step, dtype=float)
    if not 1 <= step <= per_step.shape[-1]:
        raise HorizonError(f"horizon step {step} needs {step} per-step values, have {per_step.shape[-1]}")
    return per_step[..., :step].mean(axis=-1)


# --- geometric predicates ----------------------------------------------------------


def waypoint_headings(traj, initial: float = math.pi / 2) -> np.ndarray:
    """Heading of each waypoint from the step arriving at it; the origin precedes waypoint 1.

    A zero-length step keeps the previous heading (``initial`` before the first move).
    """
    traj = np.asarray(traj, dtype=float)
    prev = np.vstack([np.zeros((1, 2)), traj[:-1]])
    step = traj - prev
    out = np.empty(len(traj))
    h = initial
    for i, (dx, dy) in enumerate(step):
        if dx * dx + dy * dy > 1e-12:
            h = math.atan2(dy, dx)
        out[i] = h
    return out


def ego_boxes(traj, ego_size=EGO_SIZE) -> np.ndarray:
    """(T, 4, 2) ego rectangles at the waypoints."""
    traj = np.asarray(traj, dtype=float)
    heads = waypoint_headings(traj)
    dirs = np.stack([np.cos(heads), np.sin(heads)], axis=-1)
    return geo.box_corners(traj, dirs, *ego_size)


def collision_flags(traj, agents_per_step, ego_size=EGO_SIZE) -> np.ndarray:
    """Per-waypoint overlap of the ego rectangle with any agent of that step (ego frame)."""
    boxes = ego_boxes(traj, ego_size)
    flags = np.zeros(len(boxes), dtype=bool)
    for h, agents in enumerate(agents_per_step):
        if not agents:
            continue
        corners = np.stack([a.corners() for a in agents])
        flags[h] = bool(geo.rects_overlap(boxes[h][None], corners).any())
    return flags


def intersection_flags(traj, boundary, ego_size=EGO_SIZE) -> np.ndarray:
    """Per-waypoint flag: ego rectangle not fully inside the drivable polygon."""
    poly = np.asarray(boundary, dtype=float)
    geo.validate_polygon(poly)
    boxes = ego_boxes(traj, ego_size)
    return np.array([not geo.rect_inside_polygon(b, poly) for b in boxes], dtype=bool)


# --- reports -------------------------------------------------------------------


@dataclass
class OpenLoopReport:
    count: int
    l2_noavg: dict
    l2_temavg: dict
    collision_noavg: dict
    collision_temavg: dict
    intersection_noavg: dict
    intersection_temavg: dict
    per_command: dict = field(default_factory=dict)  # command -> OpenLoopReport or None
    objectness: dict | None = None

    def summary(self) -> dict:
        out = {"count": self.count}
        for name in ("l2_noavg", "l2_temavg", "collision_noavg", "collision_temavg", "intersection_noavg", "intersection_temavg"):
            for k, v in getattr(self, name).items():
                out[f"{name}_{k}"] = v
        return out

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.summary().items()]
        for cmd in COMMANDS:
            sub = self.per_command.get(cmd)
            if sub is None:
                lines.append(f"{cmd}.count = absent")
                continue
            lines += [f"{cmd}.{k} = {_fmt(v)}" for k, v in sub.summary().items()]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "absent"
    return repr(float(v)) if isinstance(v, float) else str(v)


def _per_horizon(values: np.ndarray) -> dict:
    """values (S, T) -> NoAvg-style dict over 1s/2s/3s plus avg."""
    out = {k: float(values[:, s - 1].mean()) for k, s in HORIZONS.items() if s <= values.shape[1]}
    out["avg"] = float(np.mean(list(out.values()))) if out else float("nan")
    return out


def _temporal(values: np.ndarray) -> dict:
    cum = np.cumsum(values, axis=1) / np.arange(1, values.shape[1] + 1)
    return _per_horizon(cum)


def open_loop_metrics(preds, gts, collisions, intersections) -> OpenLoopReport:
    """Aggregate per-sample arrays (S, T) into an OpenLoopReport (rates in percent)."""
    d = l2_per_step(preds, gts)
    col = np.asarray(collisions, dtype=float) * 100.0
    inter = np.asarray(intersections, dtype=float) * 100.0
    return OpenLoopReport(
        count=int(len(d)),
        l2_noavg=_per_horizon(d),
        l2_temavg=_temporal(d),
        collision_noavg=_per_horizon(col),
        collision_temavg=_temporal(col),
        intersection_noavg=_per_horizon(inter),
        intersection_temavg=_temporal(inter),
    )


def split_by_command(preds, gts, collisions, intersections, commands) -> dict:
    """Metrics recomputed inside each command bucket; empty buckets map to None."""
    commands = np.asarray(commands)
    out = {}
    for cmd in COMMANDS:
        sel = commands == cmd
        if not sel.any():
            out[cmd] = None
            continue
        out[cmd] = open_loop_metrics(np.asarray(preds)[sel], np.asarray(gts)[sel], np.asarray(collisions)[sel], np.asarray(intersections)[sel])
    return out


def objectness_pr(scores, labels, thresholds=None) -> dict:
    """Precision/recall and TPR/FPR per threshold over all sectors; undefined values are None."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel() > 0
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 21)
    pos, neg = int(y.sum()), int((~y).sum())
    rows = []
    for t in thresholds:
        pred = s >= t
        tp = int((pred & y).sum())
        fp = int((pred & ~y).sum())
        fn = pos - tp
        tn = neg - fp
        rows.append(
            {
                "threshold": float(t),
                "tp": tp, "fp": fp, "fn": fn, "tn": tn,
                "precision": tp / (tp + fp) if tp + fp else None,
                "recall": tp / pos if pos else None,
                "tpr": tp / pos if pos else None,
                "fpr": fp / neg if neg else None,
            }
        )
    return {"positives": pos, "negatives": neg, "points": rows}


def curve_text(pr: dict, x: str, y: str) -> str:
    """Two-column text of the defined (x, y) points."""
    lines = [f"# {x} {y}"]
    for p in pr["points"]:
        if p[x] is not None and p[y] is not None:
            lines.append(f"{p[x]!r} {p[y]!r}")
    return "\n".join(lines) + "\n"


# --- model-driven open-loop evaluation ------------------------------------------------


@torch.no_grad()
def predict(model, samples, batch: int = 64):
    """Run the r = 0 view of every sample; returns (trajectories, objectness) arrays."""
    model.eval()
    dtype = next(model.parameters()).dtype
    trajs, scores = [], []
    for lo in range(0, len(samples), batch):
        hi = min(lo + batch, len(samples))
        r = torch.as_tensor(samples.rasters[lo:hi], dtype=dtype)
        c = torch.as_tensor(samples.commands[lo:hi], dtype=torch.long)
        st = torch.as_tensor(samples.status[lo:hi], dtype=dtype) if model.use_ego_status else None
        out = model(r, c, st)
        trajs.append(out.trajectory.double().numpy())
        scores.append(out.objectness.double().numpy())
    model.train()
    return np.concatenate(trajs), np.concatenate(scores)


def sample_geometry(scenes, samples):
    """Per-sample future agents (ego frame) and boundary polygon in the ego frame."""
    T = samples.trajs.shape[2]
    out = []
    for si, f in samples.index:
        scene = scenes[si]
        agents = [agents_in_ego(scene, f, at_frame=f + h) for h in range(1, T + 1)]
        boundary = geo.world_to_ego(np.asarray(scene.boundary), scene.pose(f))
        out.append((agents, boundary, scene.commands[f]))
    return out


def score_trajectories(preds, scenes, samples):
    """Collision and intersection flags (S, T) plus commands for predictions on ``samples``."""
    geom = sample_geometry(scenes, samples)
    col = np.array([collision_flags(p, g[0]) for p, g in zip(preds, geom)])
    inter = np.array([intersection_flags(p, g[1]) for p, g in zip(preds, geom)])
    cmds = [g[2] for g in geom]
    return col, inter, cmds


def evaluate_open_loop(model, scenes, samples, config=None) -> OpenLoopReport:
    preds, scores = predict(model, samples)
    gts = samples.trajs[:, 0]
    col, inter, cmds = score_trajectories(preds, scenes, samples)
    report = open_loop_metrics(preds, gts, col, inter)
    report.per_command = split_by_command(preds, gts, col, inter, cmds)
    report.objectness = objectness_pr(scores, samples.labels[:, 0])
    return report


# --- closed loop -------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    target_step: int = 2  # follow the 1-second waypoint
    speed_gain: float = 1.5
    max_accel: float = 1.5
    stuck_ticks: int = 10
    stuck_distance: float = 0.5
    collision_penalty: float = 0.6
    boundary_penalty: float = 0.7
    penalty_window: float = 10.0
    goal_margin: float = 25.0
    timeout_factor: float = 2.5
    off_route: float = 12.0
    command_threshold_deg: float = 25.0
    v_nominal: float = 7.0


@dataclass
class ClosedLoopReport:
    route_completion: float
    driving_score: float
    infractions: list = field(default_factory=list)  # (time, type)
    termination: str = ""
    ticks: int = 0

    def to_text(self) -> str:
        lines = [
            f"route_completion = {self.route_completion!r}",
            f"driving_score = {self.driving_score!r}",
            f"termination = {self.termination}",
            f"ticks = {self.ticks}",
        ]
        lines += [f"infraction = {t!r} {kind}" for t, kind in self.infractions]
        return "\n".join(lines) + "\n"


def driving_score(completion: float, infractions, sim: SimConfig = SimConfig()) -> float:
    """Completion times the product of per-infraction penalty factors."""
    factor = 1.0
    for _, kind in infractions:
        factor *= sim.collision_penalty if kind == "collision" else sim.boundary_penalty
    return completion * factor


def route_command(route: Route, s: float, yaw: float, v: float, horizon: int, threshold_deg: float) -> str:
    ahead = max(v * horizon * DT, 5.0)
    dpsi = math.degrees(float(geo.wrap_angle(float(route.heading(s + ahead)) - yaw)))
    if dpsi > threshold_deg:
        return "turn_left"
    if dpsi < -threshold_deg:
        return "turn_right"
    return "go_straight"


@dataclass
class TickContext:
    tick: int
    state: tuple  # (x, y, yaw, v)
    yaw_rate: float
    command: str
    agents: tuple  # world-frame agents now
    scene: object
    route: Route
    route_s: float


def _agents_at(scene, tick: int):
    return scene.agents[min(tick, scene.num_frames - 1)]


class ModelPolicy:
    """Rasterize the world around the ego and run the planner."""

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self.grid = config.grid
        self.dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def __call__(self, ctx: TickContext) -> np.ndarray:
        x, y, yaw, v = ctx.state
        raster = rasterize_world((x, y, yaw), ctx.agents, ctx.scene.boundary, self.grid, ego_speed=v)
        r = torch.as_tensor(raster[None], dtype=self.dtype)
        c = torch.tensor([command_index(ctx.command)])
        st = torch.tensor([[v, ctx.yaw_rate]], dtype=self.dtype) if self.model.use_ego_status else None
        self.model.eval()
        out = self.model(r, c, st)
        return out.trajectory[0].double().numpy()


class ExpertPolicy:
    """The scripted driver rolled forward to produce its own waypoints."""

    def __init__(self, scenario: ScenarioConfig = ScenarioConfig(), horizon: int = 6):
        self.scenario = scenario
        self.horizon = horizon

    def __call__(self, ctx: TickContext) -> np.ndarray:
        driver = ExpertDriver(ctx.route, self.scenario)
        driver.reset(ctx.route_s)
        state = ctx.state
        pts = []
        h = DT / SUBSTEPS
        for k in range(self.horizon):
            agents = list(_agents_at(ctx.scene, ctx.tick + k))
            for j in range(SUBSTEPS):
                steer, accel = driver.control(state, agents, (ctx.tick + k) * DT + j * h)
                state = bicycle_step(state, steer, accel, h)
            pts.append(state[:2])
        return geo.world_to_ego(np.asarray(pts), ctx.state[:3])


class ZeroPolicy:
    def __init__(self, horizon: int = 6):
        self.horizon = horizon

    def __call__(self, ctx: TickContext) -> np.ndarray:
        return np.zeros((self.horizon, 2))


def follow_waypoints(state, waypoints, sim: SimConfig):
    """(steer, accel) from pursuit of the target waypoint and speed matching its spacing."""
    x, y, yaw, v = state
    wp = np.asarray(waypoints, dtype=float)
    k = min(sim.target_step, len(wp))
    target_ego = wp[k - 1]
    dist = float(np.hypot(*target_ego))
    v_target = dist / (k * DT)
    if dist < 1e-3:
        steer = 0.0
    else:
        steer = pure_pursuit_steer((x, y, yaw), geo.ego_to_world(target_ego, (x, y, yaw)))
    accel = float(np.clip(sim.speed_gain * (v_target - v), -MAX_BRAKE, sim.max_accel))
    return steer, accel


def closed_loop_run(policy, scene, sim: SimConfig = SimConfig(), horizon: int = 6) -> ClosedLoopReport:
    """Drive one route from the scene's first pose until goal, timeout, stuck or leaving the road."""
    route = Route(np.asarray(scene.route))
    boundary = np.asarray(scene.boundary)
    x, y, yaw = scene.pose(0)
    state = (x, y, yaw, float(scene.ego_status[0][0]))
    s0 = route.project((x, y))
    goal = route.length - sim.goal_margin
    span = max(goal - s0, 1e-6)
    max_ticks = int(math.ceil(sim.timeout_factor * span / (sim.v_nominal * DT)))
    s_best = s0
    yaw_rate = 0.0
    history = [(x, y)]
    infractions = []
    charged = set()
    termination = "timeout"
    s_cur = s0
    ticks = 0
    for tick in range(max_ticks):
        ticks = tick + 1
        agents = _agents_at(scene, tick)
        cmd = route_command(route, s_cur, state[2], state[3], horizon, sim.command_threshold_deg)
        ctx = TickContext(tick, state, yaw_rate, cmd, agents, scene, route, s_cur)
        waypoints = policy(ctx)
        yaw_before = state[2]
        h = DT / SUBSTEPS
        for _ in range(SUBSTEPS):
            steer, accel = follow_waypoints(state, waypoints, sim)
            state = bicycle_step(state, steer, accel, h)
        yaw_rate = float(geo.wrap_angle(state[2] - yaw_before)) / DT
        t_now = (tick + 1) * DT
        s_cur = route.project(state[:2], hint=s_cur)
        s_best = max(s_best, s_cur)
        box = ego_box(state[:3])
        window = int(t_now // sim.penalty_window)
        now_agents = _agents_at(scene, tick + 1)
        if now_agents:
            corners = np.stack([a.corners() for a in now_agents])
            if geo.any_overlap(box, corners) and ("collision", window) not in charged:
                charged.add(("collision", window))
                infractions.append((t_now, "collision"))
        if not geo.rect_inside_polygon(box, boundary) and ("boundary", window) not in charged:
            charged.add(("boundary", window))
            infractions.append((t_now, "boundary"))
        history.append(state[:2])
        if s_cur >= goal:
            termination = "route_end"
            break
        c = route.point(s_cur)
        if math.hypot(state[0] - c[0], state[1] - c[1]) > sim.off_route:
            termination = "off_route"
            break
        if len(history) > sim.stuck_ticks:
            ox, oy = history[-1 - sim.stuck_ticks]
            if math.hypot(state[0] - ox, state[1] - oy) < sim.stuck_distance:
                termination = "stuck"
                break
    completion = 100.0 if termination == "route_end" else float(np.clip(100.0 * (s_best - s0) / span, 0.0, 100.0))
    return ClosedLoopReport(completion, driving_score(completion, infractions, sim), infractions, termination, ticks)


def closed_loop_suite(policy, scenes, sim: SimConfig = SimConfig(), horizon: int = 6) -> list[ClosedLoopReport]:
    return [closed_loop_run(policy, s, sim, horizon) for s in scenes]


def closed_loop_routes(n: int, seed: int, easy: bool = True, frames: int = 30) -> list:
    """Routes for the closed-loop harness; ``easy`` removes every agent."""
    from .scenario import generate_scene

    cfg = ScenarioConfig(frames=frames)
    if easy:
        cfg = dataclasses.replace(cfg, agent_count=(0, 0), p_lead=0.0)
    return [generate_scene(cfg, int(s), scene_id=f"route-{s}") for s in np.random.default_rng(seed).integers(0, 2**31, n)]


def mean_report(reports) -> dict:
    return {
        "route_completion": float(np.mean([r.route_completion for r in reports])),
        "driving_score": float(np.mean([r.driving_score for r in reports])),
        "routes": len(reports),
    }
