"""Sample preparation, directional augmentation, the training loop,
checkpoint/resume and the ablation harness."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses as L
from .bevgeo import BevGrid, ShapeError, build_partition, mask_to_angular_label, project_rois_to_mask, rasterize_world, rotate_grid, rotate_raster, rotate_traj
from .model import UADModel, command_index
from .netcore import atomic_write_text, load_checkpoint, save_checkpoint
from .scenario import expert_waypoints, filter_rois


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ConfigError):
    """Checkpoint tensors do not fit the model the config describes."""


DTYPES = {"float32": torch.float32, "float64": torch.float64}
OPTIMIZERS = ("sgd", "adam")
VIEW_REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class TrainConfig:
    theta: float = 4.0
    delta: float = 1.2
    T: int = 6
    C: int = 16
    grid_height: int = 32
    grid_width: int = 32
    grid_resolution: float = 1.0
    rotations: tuple = (90, 180, 270)
    weights: tuple = L.DEFAULT_WEIGHTS
    lr: float = 1e-2
    epochs: int = 1
    seed: int = 0
    use_spat: bool = True
    use_drm: bool = True
    use_dir: bool = True
    use_cons: bool = True
    ego_status: bool = False
    roi_conf_threshold: float = 0.35
    rule_filter: bool = True
    # desk-scale extras
    optimizer: str = "sgd"
    batch_size: int = 1
    grad_clip: float = 0.0
    dtype: str = "float32"
    plan_hidden: int = 32
    circular_update: bool = True
    bearing_init: bool = True
    view_reduction: str = "sum"
    drm_stop_prior: bool = False
    max_steps: int = 0
    checkpoint_every: int = 0
    frame_stride: int = 1
    n_scenes: int = 32
    scene_frames: int = 16

    def __post_init__(self):
        if not self.theta > 0 or abs(360.0 / self.theta - round(360.0 / self.theta)) > 1e-9:
            raise ConfigError(f"theta={self.theta} does not divide 360")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if len(self.weights) != 5 or any(w < 0 for w in self.weights):
            raise ConfigError("weights must be five non-negative numbers")
        if any(int(r) not in (90, 180, 270) for r in self.rotations):
            raise ConfigError(f"rotations must be drawn from 90, 180, 270; got {self.rotations}")
        if len(set(self.rotations)) != len(self.rotations):
            raise ConfigError("rotations must not repeat")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        if self.view_reduction not in VIEW_REDUCTIONS:
            raise ConfigError(f"view_reduction must be one of {VIEW_REDUCTIONS}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.C < 1 or self.epochs < 0 or self.frame_stride < 1 or self.n_scenes < 0:
            raise ConfigError("C, epochs, frame_stride and n_scenes must be sensible non-negative sizes")
        if self.scene_frames <= self.T:
            raise ConfigError("scene_frames must exceed the planning horizon T")

    @property
    def grid(self) -> BevGrid:
        return BevGrid(self.grid_height, self.grid_width, self.grid_resolution)

    @property
    def active_rotations(self) -> tuple:
        return tuple(int(r) for r in self.rotations)

    @property
    def effective_weights(self) -> tuple:
        toggles = (self.use_spat, self.use_drm, True, self.use_dir, self.use_cons and bool(self.rotations))
        return tuple(float(w) if on else 0.0 for w, on in zip(self.weights, toggles))

    def with_overrides(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            kind = int if name == "rotations" else float
            return tuple(kind(x) for x in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_overrides(pairs, base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``key=value`` strings to ``base``; unknown keys raise ConfigError."""
    base = base or TrainConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, value, defaults[key])
    return dataclasses.replace(base, **updates)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value")
        pairs.append(line)
    return parse_overrides(pairs, base)


def load_config(path, overrides=()) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config_text(fh.read())
    return parse_overrides(overrides, cfg)


# --- samples ----------------------------------------------------------------


@dataclass
class SampleSet:
    """Per-(scene, frame) training arrays; views axis V = 1 + |R| (r = 0 first)."""

    rotations: tuple
    rasters: np.ndarray  # (S, H, W, 4)
    masks: np.ndarray  # (S, V, H, W) uint8
    labels: np.ndarray  # (S, V, K) uint8
    trajs: np.ndarray  # (S, V, T, 2)
    directions: np.ndarray  # (S, V, T)
    commands: np.ndarray  # (S,)
    status: np.ndarray  # (S, 2)
    index: np.ndarray  # (S, 2) scene position, frame

    def __len__(self) -> int:
        return len(self.rasters)

    @property
    def views(self) -> tuple:
        return (0,) + tuple(self.rotations)

    def restrict(self, rotations) -> "SampleSet":
        """Same samples keeping only the r = 0 view and ``rotations``."""
        rotations = tuple(int(r) for r in rotations)
        keep = [self.views.index(r) for r in (0,) + rotations]
        return SampleSet(
            rotations, self.rasters, self.masks[:, keep], self.labels[:, keep], self.trajs[:, keep],
            self.directions[:, keep], self.commands, self.status, self.index,
        )

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(
            self.rotations, self.rasters[idx], self.masks[idx], self.labels[idx], self.trajs[idx],
            self.directions[idx], self.commands[idx], self.status[idx], self.index[idx],
        )


def sample_frames(scene, T: int, stride: int = 1) -> list[int]:
    return list(range(0, scene.num_frames - T, stride))


def augment_views(raster, mask, traj, partition, delta: float, rotations):
    """All views of one sample as a list of dicts (r = 0 first).

    The raster turns with the world (cells and velocity vectors), so each
    view depicts a physically consistent rotated scene.
    """
    if mask.shape[0] != mask.shape[1]:
        if rotations:
            raise ShapeError(f"directional augmentation needs a square grid, got {mask.shape}")
    views = []
    for r in (0,) + tuple(rotations):
        m = np.ascontiguousarray(rotate_grid(mask, r))
        g = rotate_traj(np.asarray(traj, dtype=float), r)
        views.append(
            {
                "r": r,
                "raster": np.ascontiguousarray(rotate_raster(raster, r)),
                "mask": m,
                "label": mask_to_angular_label(m, partition),
                "traj": g,
                "direction": L.direction_label(g, delta),
            }
        )
    return views


def prepare_samples(scenes, config: TrainConfig, rotations=None) -> SampleSet:
    """Rasterize, project filtered ROIs, and build labels for every usable frame."""
    if rotations is None:
        rotations = config.active_rotations
    grid = config.grid
    part = build_partition(grid, config.theta)
    cols = {k: [] for k in ("rasters", "masks", "labels", "trajs", "directions", "commands", "status", "index")}
    for si, scene in enumerate(scenes):
        for f in sample_frames(scene, config.T, config.frame_stride):
            raster = rasterize_world(scene.pose(f), scene.agents[f], scene.boundary, grid, ego_speed=scene.ego_status[f][0])
            rois = filter_rois(scene.rois[f], scene.cameras, config.roi_conf_threshold, config.rule_filter)
            mask = project_rois_to_mask(rois, scene.cameras, grid)
            traj = expert_waypoints(scene, f, config.T)
            views = augment_views(raster, mask, traj, part, config.delta, rotations)
            cols["rasters"].append(raster.astype(np.float32))
            cols["masks"].append(np.stack([v["mask"] for v in views]))
            cols["labels"].append(np.stack([v["label"] for v in views]))
            cols["trajs"].append(np.stack([v["traj"] for v in views]))
            cols["directions"].append(np.stack([v["direction"] for v in views]))
            cols["commands"].append(command_index(scene.commands[f]))
            cols["status"].append(scene.ego_status[f])
            cols["index"].append((si, f))
    if not cols["rasters"]:
        raise ValueError("no usable samples: dataset is empty or scenes are shorter than the horizon")
    arr = {k: np.asarray(v) for k, v in cols.items()}
    return SampleSet(
        tuple(rotations), arr["rasters"], arr["masks"].astype(np.uint8), arr["labels"].astype(np.uint8),
        arr["trajs"].astype(np.float64), arr["directions"].astype(np.int64), arr["commands"].astype(np.int64),
        arr["status"].astype(np.float64), arr["index"].astype(np.int64),
    )


# --- model / optimizer ----------------------------------------------------------


def build_model(config: TrainConfig) -> UADModel:
    torch.manual_seed(config.seed)
    model = UADModel(
        build_partition(config.grid, config.theta),
        channels=config.C,
        horizon=config.T,
        plan_hidden=config.plan_hidden,
        ego_status=config.ego_status,
        circular_update=config.circular_update,
        bearing_init=config.bearing_init,
    )
    return model.to(DTYPES[config.dtype])


def build_optimizer(model, config: TrainConfig):
    params = list(model.parameters())
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    return torch.optim.SGD(params, lr=config.lr)


# --- one step ---------------------------------------------------------------


def compute_losses(model: UADModel, samples: SampleSet, idx, config: TrainConfig, dtype=None):
    """Forward every view of the sample(s) ``idx``; returns (LossReport, PlanOutput).

    ``idx`` is one index or a sequence of them; outputs are laid out
    sample-major, ``V`` views per sample.
    """
    dtype = dtype or next(model.parameters()).dtype
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    views = samples.views
    b, V = len(idx), len(views)
    rasters = torch.as_tensor(samples.rasters[idx], dtype=dtype)
    feats = model.encode_scene(torch.stack([rotate_raster(rasters[i], r) for i in range(b) for r in views]))
    command = torch.as_tensor(samples.commands[idx], dtype=torch.long).repeat_interleave(V)
    status = None
    if model.use_ego_status:
        status = torch.as_tensor(samples.status[idx], dtype=dtype).repeat_interleave(V, dim=0)
    out = model.forward_features(feats, command, status)
    traj = out.trajectory.reshape(b, V, *out.trajectory.shape[1:])
    w = config.effective_weights
    # per-view losses average over everything; "sum" then counts each view as a sample of its own
    per_view = float(V) if config.view_reduction == "sum" else 1.0
    comps = {"l_imi": L.l_imi(traj, samples.trajs[idx]) * per_view}
    if w[0] > 0:
        comps["l_spat"] = L.l_spat(out.objectness, samples.labels[idx].reshape(b * V, -1)) * per_view
    if w[1] > 0:
        comps["l_drm"] = L.l_drm(out.rollout.posteriors, out.rollout.priors, config.drm_stop_prior) * per_view
    if w[3] > 0:
        comps["l_dir"] = L.l_dir(out.direction, samples.directions[idx].reshape(b * V, -1)) * per_view
    if w[4] > 0 and V > 1:
        aug = {r: traj[:, j] for j, r in enumerate(views) if r}
        comps["l_cons"] = L.l_cons(traj[:, 0], aug, tuple(views[1:]))
    return L.total_loss(comps, w), out


def train_step(model, optimizer, samples: SampleSet, idx, config: TrainConfig) -> L.LossReport:
    optimizer.zero_grad(set_to_none=True)
    report, _ = compute_losses(model, samples, idx, config)
    report.total_tensor.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return report


# --- checkpoints ----------------------------------------------------------------


def checkpoint_tensors(model, optimizer) -> dict:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            for key, val in optimizer.state.get(p, {}).items():
                t = val if isinstance(val, torch.Tensor) else torch.tensor(val)
                tensors[f"optim.{names[id(p)]}.{key}"] = t
    return tensors


def save_training_checkpoint(path, model, optimizer, config: TrainConfig, step: int) -> None:
    meta = {"config": config.to_text(), "step": int(step), "model": model.describe()}
    save_checkpoint(path, checkpoint_tensors(model, optimizer), meta)


def restore(path, config: TrainConfig | None = None):
    """Rebuild (model, optimizer, config, step) from a checkpoint written by :func:`fit`."""
    tensors, meta = load_checkpoint(path)
    saved = parse_config_text(meta["config"])
    config = config or saved
    model = build_model(config)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    own = model.state_dict()
    for k, v in state.items():
        if k not in own or own[k].shape != v.shape:
            raise CheckpointMismatch(f"checkpoint tensor {k} {tuple(v.shape)} does not fit the configured model")
    missing = set(own) - set(state)
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
    optimizer = build_optimizer(model, config)
    by_param: dict = {}
    for k, v in tensors.items():
        if k.startswith("optim."):
            pname, key = k[len("optim."):].rsplit(".", 1)
            by_param.setdefault(pname, {})[key] = v
    params = dict(model.named_parameters())
    for pname, st in by_param.items():
        optimizer.state[params[pname]] = {key: (v.clone() if v.dim() else v.clone()) for key, v in st.items()}
    return model, optimizer, config, int(meta["step"])


# --- fit ----------------------------------------------------------------------


@dataclass
class FitResult:
    model: UADModel
    config: TrainConfig
    steps: int
    log: list = field(default_factory=list)
    checkpoint: str | None = None


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def fit(samples, config: TrainConfig, out_dir=None, resume=None, log_every: int = 1) -> FitResult:
    """Train for ``config.epochs`` epochs (capped by ``max_steps`` when positive).

    ``samples`` is a SampleSet or a list of scenes. With ``out_dir`` the log
    and checkpoints are written there; ``resume`` names a checkpoint to
    continue from.
    """
    if not isinstance(samples, SampleSet):
        if not samples:
            raise ValueError("cannot train on an empty dataset")
        samples = prepare_samples(samples, config)
    if len(samples) == 0:
        raise ValueError("cannot train on an empty dataset")
    if tuple(samples.rotations) != config.active_rotations:
        raise ConfigError("sample views do not match the configured rotation set")
    torch.set_num_threads(1)
    n = len(samples)
    per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * per_epoch
    if config.max_steps > 0:
        total_steps = min(total_steps, config.max_steps)
    log: list[str] = []
    if resume is not None:
        model, optimizer, _, step = restore(resume, config)
        if out_dir is not None and os.path.exists(_log_path(out_dir)):
            with open(_log_path(out_dir), encoding="utf-8") as fh:
                log = [ln.rstrip("\n") for ln in fh if ln.strip()][:step]
    else:
        model, step = build_model(config), 0
        optimizer = build_optimizer(model, config)
    model.train()
    ckpt = None
    order, order_epoch = None, -1
    while step < total_steps:
        epoch, pos = divmod(step, per_epoch)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(n, config.seed, epoch), epoch
        batch = order[pos * config.batch_size : (pos + 1) * config.batch_size]
        report = train_step(model, optimizer, samples, batch, config)
        step += 1
        if step % log_every == 0 or step == total_steps:
            log.append(report.as_line(step))
        if out_dir is not None and config.checkpoint_every > 0 and step % config.checkpoint_every == 0:
            ckpt = _write_outputs(out_dir, model, optimizer, config, step, log)
    if out_dir is not None:
        ckpt = _write_outputs(out_dir, model, optimizer, config, step, log)
    return FitResult(model, config, step, log, ckpt)


def _log_path(out_dir) -> str:
    return os.path.join(os.fspath(out_dir), "train.log")


def _write_outputs(out_dir, model, optimizer, config, step, log) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(os.fspath(out_dir), f"checkpoint-{step:07d}.ckpt")
    save_training_checkpoint(path, model, optimizer, config, step)
    latest = os.path.join(os.fspath(out_dir), "model.ckpt")
    save_training_checkpoint(latest, model, optimizer, config, step)
    atomic_write_text(_log_path(out_dir), "".join(line + "\n" for line in log))
    return latest


# --- ablation --------------------------------------------------------------------

ROW_TOGGLES = {
    "imi": dict(use_spat=False, use_drm=False, use_dir=False, use_cons=False, rotations=()),
    "+spat": dict(use_spat=True, use_drm=False, use_dir=False, use_cons=False, rotations=()),
    "+drm": dict(use_spat=False, use_drm=True, use_dir=False, use_cons=False, rotations=()),
    "+dir": dict(use_spat=False, use_drm=False, use_dir=True, use_cons=False, rotations=()),
    "+cons": dict(use_spat=False, use_drm=False, use_dir=False, use_cons=True),
    "full": dict(use_spat=True, use_drm=True, use_dir=True, use_cons=True),
}
THETA_SWEEP = (1.0, 2.0, 4.0, 8.0, 15.0, 30.0)
DELTA_SWEEP = (0.5, 0.8, 1.2, 1.5, 2.0)


def loss_rows(config: TrainConfig) -> dict:
    """Loss-toggle variants; the augmented rows keep the configured rotation set."""
    rows = {}
    for name, kw in ROW_TOGGLES.items():
        kw = dict(kw)
        if "rotations" not in kw:
            kw["rotations"] = config.rotations or (90, 180, 270)
        rows[name] = config.with_overrides(**kw)
    return rows


def sweep_rows(config: TrainConfig, kind: str, values=None) -> dict:
    if kind == "loss":
        return loss_rows(config)
    if kind == "theta":
        return {f"theta={v:g}": config.with_overrides(theta=float(v)) for v in (values or THETA_SWEEP)}
    if kind == "delta":
        return {f"delta={v:g}": config.with_overrides(delta=float(v)) for v in (values or DELTA_SWEEP)}
    if kind == "roi":
        return {
            "conf=0.35,rule": config.with_overrides(roi_conf_threshold=0.35, rule_filter=True),
            "conf=0.35": config.with_overrides(roi_conf_threshold=0.35, rule_filter=False),
            "conf=0,rule": config.with_overrides(roi_conf_threshold=0.0, rule_filter=True),
            "conf=0": config.with_overrides(roi_conf_threshold=0.0, rule_filter=False),
        }
    raise ValueError(f"unknown sweep {kind!r}")


def ablate(train_scenes, test_scenes, rows: dict, seeds=(0,), evaluate=None) -> list[dict]:
    """Train every row for every seed and evaluate it on ``test_scenes``.

    Returns one dict per (row, seed) with the open-loop summary metrics.
    """
    from .evaluation import evaluate_open_loop

    evaluate = evaluate or evaluate_open_loop
    table = []
    cache: dict = {}
    for name, cfg in rows.items():
        key = _sample_key(cfg)
        if key not in cache:
            cache[key] = (prepare_samples(train_scenes, cfg), prepare_samples(test_scenes, cfg, rotations=()))
        train, test = cache[key]
        for seed in seeds:
            c = cfg.with_overrides(seed=int(seed))
            res = fit(train, c)
            report = evaluate(res.model, test_scenes, test, c)
            row = {"variant": name, "seed": int(seed)}
            row.update(report.summary())
            table.append(row)
    return table


def _sample_key(cfg: TrainConfig):
    return (cfg.theta, cfg.delta, cfg.T, cfg.grid_height, cfg.grid_width, cfg.grid_resolution,
            cfg.roi_conf_threshold, cfg.rule_filter, cfg.frame_stride, cfg.active_rotations)


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"


def median_by_variant(rows: list[dict], metric: str) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r[metric])
    return {k: float(np.median(v)) for k, v in out.items()}

