"""Command line entry points: generate, train, render, eval.

Every command is driven by a JSON run config (see config.py) or by
direct flags; output paths resolve under $AVATARCL_OUT_ROOT when that
variable is set and the path is relative.  Output directories are
lockfile-guarded so concurrent commands cannot interleave writes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from filelock import FileLock

from . import data as data_io
from . import trainer as tr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_arch, build_options, build_schedule, load_config
from .metrics import MetricReport, forgetting_report
from .perceptual import get_perceptual
from .rotations import identity_quat
from .skeleton import BodyPose, load_rig
from .synth import build_default_rig, make_task_sequence, orbit_camera
from .trainer import TaskSpec, TrainImage

OUT_ROOT_VAR = "AVATARCL_OUT_ROOT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_VAR)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _lock(out_dir: str) -> FileLock:
    os.makedirs(out_dir, exist_ok=True)
    return FileLock(os.path.join(out_dir, ".avatarcl.lock"))


def _load_rig_for(cfg: RunConfig):
    if cfg.rig is not None:
        return load_rig(cfg.rig)
    return build_default_rig()


def _synth_tasks(cfg: RunConfig, rig):
    s = cfg.synth
    return make_task_sequence(
        rig, s.palettes, views_per_task=s.views_per_task, seed=cfg.seed,
        image_size=cfg.image_size, eval_views=s.eval_views,
        eval_poses=s.eval_poses, pose_noise=s.pose_noise,
        radius_scales=s.radius_scales,
    )


def _task_sequence(cfg: RunConfig):
    """Returns (rig, tasks) from the dataset dir or fresh synthesis."""
    if cfg.dataset is not None:
        return data_io.load_dataset(_resolve_out(cfg.dataset))
    rig = _load_rig_for(cfg)
    return rig, _synth_tasks(cfg, rig)


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if cfg.synth is None:
        raise ConfigError("generate needs a 'synth' block in the config")
    out_dir = _resolve_out(args.out or os.path.join(cfg.out_dir, "dataset"))
    with _lock(out_dir):
        rig = _load_rig_for(cfg)
        tasks = _synth_tasks(cfg, rig)
        meta = {
            "seed": cfg.seed,
            "views_per_task": cfg.synth.views_per_task,
            "eval_views": cfg.synth.eval_views,
            "eval_poses": cfg.synth.eval_poses,
            "pose_noise": cfg.synth.pose_noise,
            "image_size": cfg.image_size,
            "palettes": list(cfg.synth.palettes),
            "radius_scales": cfg.synth.radius_scales
            if isinstance(cfg.synth.radius_scales, str) or cfg.synth.radius_scales is None
            else list(cfg.synth.radius_scales),
        }
        data_io.save_dataset(out_dir, rig, tasks, meta=meta)
    for n, t in enumerate(tasks, start=1):
        print(f"task {n:02d}  palette={t.palette_name:8s}  "
              f"train={len(t.train)}  eval_view={len(t.eval_novel_view)}  "
              f"eval_pose={len(t.eval_novel_pose)}")
    print(f"dataset written to {out_dir}")
    return 0


def _specs_from_tasks(tasks) -> list:
    specs = []
    for t in tasks:
        images = [TrainImage(r.image, r.camera, r.pose) for r in t.train]
        specs.append(TaskSpec(appearance_id=t.appearance_id, images=images))
    return specs


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = _resolve_out(cfg.out_dir)
    schedule = build_schedule(cfg)
    options = build_options(cfg)
    arch = build_arch(cfg)
    with _lock(out_dir):
        rig, tasks = _task_sequence(cfg)
        specs = _specs_from_tasks(tasks)
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        log_dir = os.path.join(out_dir, "logs")
        os.makedirs(ckpt_dir, exist_ok=True)

        if cfg.mode == "joint":
            state = tr.init_state(rig, schedule, **arch)
            ckpt = tr.train_joint(state, specs, schedule, options, log_dir=log_dir)
            path = os.path.join(ckpt_dir, "joint.zip")
            save_checkpoint(ckpt, path)
            print(f"joint run over {len(specs)} tasks -> {path}")
            return 0

        existing = sorted(f for f in os.listdir(ckpt_dir)
                          if f.startswith("task_") and f.endswith(".zip"))
        start = 0
        state = None
        if existing:
            if not args.resume:
                raise SystemExit(
                    f"{ckpt_dir} already holds checkpoints; pass --resume "
                    "to continue or use a fresh out_dir")
            last = load_checkpoint(os.path.join(ckpt_dir, existing[-1]))
            state = tr.resume_state(last, schedule, arch)
            start = last.task_index
            print(f"resuming after task {start}")
        if state is None:
            state = tr.init_state(rig, schedule, **arch)

        for i in range(start, len(specs)):
            ckpt = tr.train_task(state, specs[i], schedule, options, log_dir=log_dir)
            path = os.path.join(ckpt_dir, f"task_{ckpt.task_index:02d}.zip")
            save_checkpoint(ckpt, path)
            terms = state.last_step_terms
            print(f"task {ckpt.task_index:02d}  appearance={specs[i].appearance_id}  "
                  f"final L_CR={terms['l_cr']:.4f}  -> {path}")
    return 0


def _rest_pose(rig) -> BodyPose:
    rot = identity_quat((rig.bone_count,), dtype=rig.rest_joints.dtype)
    return BodyPose(joints=rig.rest_joints.clone(), rotations=rot)


def _pose_from_file(path) -> BodyPose:
    with open(path) as f:
        return BodyPose.from_json_dict(json.load(f))


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = tr.restore_model(ckpt)
    rig = model.rig
    pose = _pose_from_file(args.pose_file) if args.pose_file else _rest_pose(rig)
    out = _resolve_out(args.out)

    def one(azimuth: float, path: str):
        cam = orbit_camera(azimuth, elevation_deg=args.elevation,
                           distance=args.distance, image_size=args.image_size)
        img = tr.render_from_task(ckpt, args.task, cam, pose,
                                  n_samples=args.samples, model=model)
        data_io.save_image(path, img)
        print(path)

    if args.orbit:
        os.makedirs(out, exist_ok=True)
        for i in range(args.orbit):
            one(args.azimuth + 360.0 * i / args.orbit,
                os.path.join(out, f"frame_{i:03d}.png"))
    else:
        parent = os.path.dirname(os.path.abspath(out))
        os.makedirs(parent, exist_ok=True)
        one(args.azimuth, out)
    return 0


def _check_assertions(report: MetricReport, rules: dict) -> list:
    """Evaluate ordering assertions; returns [(name, ok, detail), ...]."""
    results = []
    if "min_past_psnr" in rules:
        want = float(rules["min_past_psnr"])
        got = report.past_task_mean("psnr")
        ok = got is not None and got >= want
        results.append(("min_past_psnr", ok,
                        f"past-task PSNR {got if got is None else round(got, 3)} "
                        f">= {want}"))
    if "margin_over" in rules:
        other = MetricReport.from_json_dict(
            json.loads(open(_resolve_out(rules["margin_over"])).read()))
        margin = float(rules.get("margin_db", 3.0))
        mine = report.past_task_mean("psnr")
        theirs = other.past_task_mean("psnr")
        ok = mine is not None and theirs is not None and mine >= theirs + margin
        results.append(("margin_over", ok,
                        f"past-task PSNR {round(mine, 3)} >= "
                        f"{round(theirs, 3)} + {margin}"))
    return results


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rig, tasks = data_io.load_dataset(_resolve_out(args.dataset))
    model = tr.restore_model(ckpt)
    datasets = {i + 1: t.eval_records for i, t in enumerate(tasks)
                if (i + 1) in ckpt.appearance_map}
    if not datasets:
        raise SystemExit("no dataset task matches the checkpoint's task map")
    perceptual = None if args.perceptual == "none" else get_perceptual(args.perceptual)

    def render_fn(task_index, camera, pose):
        return tr.render_from_task(ckpt, task_index, camera, pose,
                                   n_samples=args.samples, model=model)

    report = forgetting_report(render_fn, datasets,
                               task_index_at_evaluation=ckpt.task_index,
                               perceptual=perceptual)
    rules = {}
    if args.config:
        rules.update(load_config(args.config).eval)
    if args.min_past_psnr is not None:
        rules["min_past_psnr"] = args.min_past_psnr
    if args.margin_over is not None:
        rules["margin_over"] = args.margin_over
        rules["margin_db"] = args.margin_db
    assertions = _check_assertions(report, rules)

    out_dir = _resolve_out(args.out)
    with _lock(out_dir):
        payload = report.to_json_dict()
        payload["assertions"] = [
            {"name": n, "passed": ok, "detail": d} for n, ok, d in assertions
        ]
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
        with open(os.path.join(out_dir, "report.txt"), "w") as f:
            f.write(report.to_text() + "\n")
    print(report.to_text())
    failed = False
    for name, ok, detail in assertions:
        print(f"assert {name}: {'PASS' if ok else 'FAIL'}  ({detail})")
        failed = failed or not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarcl",
                                description="continual avatar training pipeline")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="emit a synthetic task-sequence dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default=None, help="dataset dir (default out_dir/dataset)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the task sequence (or joint baseline)")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", action="store_true",
                   help="continue after the last stored checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a historical appearance")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--task", type=int, required=True)
    r.add_argument("--out", required=True, help="PNG path (dir when --orbit)")
    r.add_argument("--azimuth", type=float, default=0.0)
    r.add_argument("--elevation", type=float, default=12.0)
    r.add_argument("--distance", type=float, default=2.7)
    r.add_argument("--image-size", type=int, default=64)
    r.add_argument("--orbit", type=int, default=0,
                   help="emit N azimuth-stepped frames instead of one image")
    r.add_argument("--pose-file", default=None,
                   help="BodyPose JSON; omitted = rest pose")
    r.add_argument("--samples", type=int, default=None)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="forgetting report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--config", default=None, help="config holding eval assertions")
    e.add_argument("--perceptual", default="gradssim")
    e.add_argument("--samples", type=int, default=None)
    e.add_argument("--min-past-psnr", type=float, default=None)
    e.add_argument("--margin-over", default=None,
                   help="baseline report.json that this run must beat")
    e.add_argument("--margin-db", type=float, default=3.0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, data_io.DatasetError, CheckpointError,
            tr.UnknownTaskError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
