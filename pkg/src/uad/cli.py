"""Command-line entry point: ``uad <subcommand> [--config PATH] [--seed N] [--out DIR] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile

import numpy as np

from .netcore import NumericError, ShapeError as NetShapeError
from .bevgeo import ShapeError as GridShapeError
from .scenario import DatasetParseError, InfeasibleConfigError, ScenarioConfig, generate_dataset, load_dataset, save_dataset
from .training import CheckpointMismatch, ConfigError, TrainConfig, load_config, parse_overrides

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_SHAPE = 6
EXIT_NUMERIC = 7

SUBCOMMANDS = ("gen-data", "train", "eval-open", "eval-closed", "ablate", "inspect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uad", description="Angular-perception planner on a synthetic driving world.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value training config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data", help="dataset file (default: OUT/dataset.jsonl)")
    p.add_argument("--checkpoint", help="checkpoint file (default: OUT/model.ckpt)")
    p.add_argument("--resume", help="checkpoint to resume training from")
    p.add_argument("--routes", type=int, default=20, help="closed-loop route count")
    p.add_argument("--policy", choices=("model", "expert"), default="model")
    p.add_argument("--sweep", choices=("loss", "theta", "delta", "roi"), default="loss")
    p.add_argument("--seeds", type=int, default=1, help="ablation seeds per row")
    p.add_argument("--holdout", type=float, default=0.25, help="held-out scene fraction for ablation")
    p.add_argument("--scene", type=int, default=0, help="inspect: scene position in the dataset")
    p.add_argument("--frame", type=int, default=0, help="inspect: frame")
    p.add_argument("--plots", action="store_true", help="eval-open: also write PR/ROC plots")
    return p


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg = parse_overrides(args.overrides, cfg)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


class Staging:
    """Collect outputs in a scratch directory and move them into place only on success."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        parent = os.path.dirname(os.path.abspath(out_dir)) or "."
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".uad-stage-", dir=parent)

    def path(self, name: str) -> str:
        return os.path.join(self.tmp, name)

    def commit(self):
        os.makedirs(self.out_dir, exist_ok=True)
        for name in sorted(os.listdir(self.tmp)):
            os.replace(os.path.join(self.tmp, name), os.path.join(self.out_dir, name))
        self.discard()

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _data_path(args) -> str:
    return args.data or os.path.join(args.out, "dataset.jsonl")


def _ckpt_path(args) -> str:
    return args.checkpoint or os.path.join(args.out, "model.ckpt")


def _require(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(path)


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, n)]


def cmd_gen_data(args, cfg: TrainConfig, stage: Staging):
    scenario = ScenarioConfig(frames=cfg.scene_frames, horizon=cfg.T)
    scenes = generate_dataset(scenario, scene_seeds(cfg.seed, cfg.n_scenes))
    save_dataset(scenes, stage.path("dataset.jsonl"))
    return f"wrote {len(scenes)} scenes"


def cmd_train(args, cfg: TrainConfig, stage: Staging):
    from .training import fit

    path = _data_path(args)
    _require(path)
    scenes = load_dataset(path)
    if args.resume:
        _require(args.resume)
        if os.path.exists(os.path.join(args.out, "train.log")):
            shutil.copy(os.path.join(args.out, "train.log"), stage.path("train.log"))
    res = fit(scenes, cfg, out_dir=stage.tmp, resume=args.resume)
    _write(stage.path("config.txt"), cfg.to_text())
    return f"trained {res.steps} steps"


def _load_model(args, cfg: TrainConfig | None = None):
    from .training import restore

    path = _ckpt_path(args)
    _require(path)
    model, _, saved, _ = restore(path, cfg)
    return model, saved


def _model_config(args):
    """Checkpoint config with the command-line overrides applied on top."""
    from .netcore import load_checkpoint
    from .training import parse_config_text

    path = _ckpt_path(args)
    _require(path)
    _, meta = load_checkpoint(path)
    cfg = parse_config_text(meta["config"])
    if args.config:
        cfg = load_config(args.config)
    cfg = parse_overrides(args.overrides, cfg)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def cmd_eval_open(args, cfg: TrainConfig, stage: Staging):
    from .evaluation import curve_text, evaluate_open_loop
    from .training import prepare_samples

    cfg = _model_config(args)
    model, cfg = _load_model(args, cfg)
    path = _data_path(args)
    _require(path)
    scenes = load_dataset(path)
    samples = prepare_samples(scenes, cfg, rotations=())
    report = evaluate_open_loop(model, scenes, samples, cfg)
    _write(stage.path("open_loop.txt"), report.to_text())
    _write(stage.path("pr.txt"), curve_text(report.objectness, "recall", "precision"))
    _write(stage.path("roc.txt"), curve_text(report.objectness, "fpr", "tpr"))
    if args.plots:
        from .plots import plot_curves

        plot_curves(report.objectness, stage.path("pr_roc.png"))
    return f"avg L2 {report.l2_noavg['avg']:.4f} m over {report.count} samples"


def cmd_eval_closed(args, cfg: TrainConfig, stage: Staging):
    from .evaluation import ExpertPolicy, ModelPolicy, closed_loop_routes, closed_loop_suite, mean_report

    if args.policy == "expert":
        policy = ExpertPolicy(horizon=cfg.T)
    else:
        cfg = _model_config(args)
        model, cfg = _load_model(args, cfg)
        policy = ModelPolicy(model, cfg)
    routes = closed_loop_routes(args.routes, cfg.seed)
    reports = closed_loop_suite(policy, routes, horizon=cfg.T)
    summary = mean_report(reports)
    lines = [f"{k} = {v!r}" for k, v in summary.items()]
    for scene, rep in zip(routes, reports):
        lines += [f"{scene.scene_id}.{ln}" for ln in rep.to_text().splitlines()]
    _write(stage.path("closed_loop.txt"), "\n".join(lines) + "\n")
    return f"route completion {summary['route_completion']:.1f}%, driving score {summary['driving_score']:.1f}%"


def cmd_ablate(args, cfg: TrainConfig, stage: Staging):
    from .training import ablate, format_table, sweep_rows

    path = _data_path(args)
    _require(path)
    scenes = load_dataset(path)
    n_test = max(1, int(round(len(scenes) * args.holdout)))
    if n_test >= len(scenes):
        raise ValueError("holdout leaves no training scenes")
    rows = sweep_rows(cfg, args.sweep)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    table = ablate(scenes[:-n_test], scenes[-n_test:], rows, seeds)
    _write(stage.path(f"ablation-{args.sweep}.tsv"), format_table(table))
    return f"{len(table)} variant runs"


def cmd_inspect(args, cfg: TrainConfig, stage: Staging):
    from .plots import render_inspection

    path = _data_path(args)
    _require(path)
    scenes = load_dataset(path)
    if not 0 <= args.scene < len(scenes):
        raise IndexError(f"scene {args.scene} outside dataset of {len(scenes)}")
    model = None
    ckpt = _ckpt_path(args)
    if args.checkpoint or os.path.exists(ckpt):
        cfg = _model_config(args)
        model, cfg = _load_model(args, cfg)
    render_inspection(scenes[args.scene], args.frame, cfg, model, stage.path("inspect.png"))
    return "wrote inspect.png"


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-open": cmd_eval_open,
    "eval-closed": cmd_eval_closed,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    stage = None
    try:
        cfg = resolve_config(args)
        stage = Staging(args.out)
        message = HANDLERS[args.subcommand](args, cfg, stage)
        stage.commit()
        print(f"uad {args.subcommand}: {message}")
        return EXIT_OK
    except CheckpointMismatch as exc:
        code, msg = EXIT_SHAPE, f"checkpoint mismatch: {exc}"
    except (ConfigError, InfeasibleConfigError) as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, f"missing file: {exc.filename or exc}"
    except DatasetParseError as exc:
        code, msg = EXIT_DATA, f"dataset error: {exc}"
    except (NetShapeError, GridShapeError) as exc:
        code, msg = EXIT_SHAPE, f"shape error: {exc}"
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, f"numeric error: {exc}"
    except (ValueError, IndexError, OSError) as exc:
        code, msg = EXIT_FAILURE, f"error: {exc}"
    if stage is not None:
        stage.discard()
    print(f"uad {args.subcommand}: {msg}", file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
