"""Sequential task training with generative replay and pose distillation.

Each new task follows the four-step protocol: freeze and copy the
previous model as the teacher, render the current task's supervision
patches live, render past-task supervision with the teacher from saved
(camera, pose, appearance) records, and train on both together.  The
final t_0 iterations (phase 2) freeze everything except the
pose-correction MLP and the global color embedding and add the pose
distillation term.
"""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import losses as L
from . import render as R
from .field import AvatarModel, build_model
from .perceptual import get_perceptual
from .render import CameraParams, PatchSpec
from .skeleton import BodyPose, SkeletonRig


@dataclass
class ReplayRecord:
    """Saved supervision coordinates from a past task (never pixels)."""

    task_index: int
    appearance_id: int
    camera: CameraParams
    pose: BodyPose

    def to_json_dict(self) -> dict:
        return {
            "task_index": self.task_index,
            "appearance_id": self.appearance_id,
            "camera": self.camera.to_json_dict(),
            "pose": self.pose.to_json_dict(),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ReplayRecord":
        return ReplayRecord(
            task_index=int(d["task_index"]),
            appearance_id=int(d["appearance_id"]),
            camera=CameraParams.from_json_dict(d["camera"]),
            pose=BodyPose.from_json_dict(d["pose"]),
        )


class ReplayStore:
    """Append-only record store; one list per past task."""

    def __init__(self):
        self._records: list = []

    def append(self, record: ReplayRecord):
        self._records.append(record)

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    @property
    def task_indices(self) -> list:
        return sorted({r.task_index for r in self._records})

    def by_task(self, task_index: int) -> list:
        return [r for r in self._records if r.task_index == task_index]

    def to_json_list(self) -> list:
        return [r.to_json_dict() for r in self._records]

    @staticmethod
    def from_json_list(items: list) -> "ReplayStore":
        store = ReplayStore()
        for d in items:
            store.append(ReplayRecord.from_json_dict(d))
        return store


@dataclass
class TrainImage:
    image: np.ndarray       # (H, W, 3) float in [0, 1]
    camera: CameraParams
    pose: BodyPose


@dataclass
class TaskSpec:
    """One appearance's few-shot training set plus its iteration budget."""

    appearance_id: int
    images: list                       # list of TrainImage
    iterations: Optional[int] = None   # None = schedule.t_max

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("a task needs at least one training image")


@dataclass
class TrainOptions:
    """Rendering and ablation knobs for training (schedule lives apart)."""

    n_samples_train: int = 10
    n_samples_eval: int = 32
    patch_current: PatchSpec = dc_field(default_factory=lambda: PatchSpec(2, 8, "current"))
    patch_past: PatchSpec = dc_field(default_factory=lambda: PatchSpec(1, 10, "past"))
    perceptual: str = "gradssim"
    background: float = 1.0
    naive_finetune: bool = False
    disable_pose_distill: bool = False
    warm_start: bool = False
    warm_start_factor: float = 2.0

    def to_json_dict(self) -> dict:
        d = self.__dict__.copy()
        d["patch_current"] = [self.patch_current.count, self.patch_current.side]
        d["patch_past"] = [self.patch_past.count, self.patch_past.side]
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "TrainOptions":
        d = dict(d)
        pc = d.pop("patch_current")
        pp = d.pop("patch_past")
        return TrainOptions(
            patch_current=PatchSpec(pc[0], pc[1], "current"),
            patch_past=PatchSpec(pp[0], pp[1], "past"),
            **d,
        )


class TrainerState:
    """Mutable cross-task training state: the model and the replay store."""

    def __init__(self, model: AvatarModel, arch: dict):
        self.model = model
        self.arch = dict(arch)
        self.replay = ReplayStore()
        self.appearance_map: dict = {}
        self.next_task_index = 1
        self.last_step_terms: dict = {}
        self.loss_log: list = []

    @property
    def rig(self) -> SkeletonRig:
        return self.model.rig


def init_state(rig: SkeletonRig, schedule: L.TrainSchedule, width: int = 32,
               triplane_res: int = 64, triplane_feat: int = 8,
               generator_channels: int = 8, l_freq: int = 10,
               max_frames: int = 256, use_local_embeddings: bool = True,
               use_pose_correction: bool = True) -> TrainerState:
    arch = {
        "width": width, "triplane_res": triplane_res,
        "triplane_feat": triplane_feat, "generator_channels": generator_channels,
        "l_freq": l_freq, "max_frames": max_frames,
        "use_local_embeddings": use_local_embeddings,
        "use_pose_correction": use_pose_correction,
        "seed": schedule.seed,
    }
    model = build_model(rig, width=width, l_freq=l_freq, triplane_res=triplane_res,
                        triplane_feat=triplane_feat,
                        generator_channels=generator_channels,
                        max_frames=max_frames, seed=schedule.seed,
                        use_local_embeddings=use_local_embeddings,
                        use_pose_correction=use_pose_correction)
    return TrainerState(model, arch)


def _param_groups(model: AvatarModel, schedule: L.TrainSchedule):
    """Main rate for the field MLP and global embeddings, lower for the rest."""
    main = list(model.mlp_o.parameters()) + [model.store.color_embed,
                                             model.store.geometry_embed]
    main_ids = {id(p) for p in main}
    rest = [p for p in model.parameters() if id(p) not in main_ids]
    return [
        {"params": main, "lr": schedule.lr_main},
        {"params": rest, "lr": schedule.lr_rest},
    ]


def _make_optimizer(model: AvatarModel, schedule: L.TrainSchedule):
    # foreach batches the many small parameter tensors per step
    return torch.optim.Adam(_param_groups(model, schedule), foreach=True)


def _freeze_for_phase2(model: AvatarModel):
    """Freeze everything except the pose MLP and the global color embedding."""
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None
    if model.pose_net is not None:
        for p in model.pose_net.parameters():
            p.requires_grad_(True)
    model.store.color_embed.requires_grad_(True)


def _unfreeze_all(model: AvatarModel):
    for p in model.parameters():
        p.requires_grad_(True)


def _scalar(x):
    return None if x is None else float(x.detach())


class MissingTeacherError(RuntimeError):
    pass


class UnknownTaskError(KeyError):
    pass


def _prerender_teacher(teacher: AvatarModel, replay: ReplayStore,
                       options: TrainOptions):
    """Render each replay record once with the frozen teacher.

    Teacher rendering is deterministic midpoint quadrature, so cropping
    the cached full image at a patch rectangle equals rendering that
    patch directly.  Pose residual targets are cached alongside.
    """
    cache = {}
    with torch.no_grad():
        for i, rec in enumerate(replay.records):
            img = R.render_image(teacher, rec.camera, rec.pose, rec.appearance_id,
                                 n_samples=options.n_samples_train, mode="eval",
                                 background=options.background)
            res = None
            if teacher.pose_net is not None:
                res = teacher.pose_net.residual(rec.pose).detach().clone()
            cache[i] = (img, res)
    return cache


def train_task(state: TrainerState, spec: TaskSpec, schedule: L.TrainSchedule,
               options: Optional[TrainOptions] = None,
               log_dir=None) -> ckpt_io.TaskCheckpoint:
    """Train one task and return the immutable checkpoint.

    Per iteration: (a) a current-task patch batch from the task's
    images; (b) for tasks after the first, one replay record from a
    uniformly random past task rendered by the frozen teacher; (c/d)
    phase-1/phase-2 objective with selective freezing; (e) checkpoint
    emission and replay-store append on completion.
    """
    options = options or TrainOptions()
    model = state.model
    task_index = state.next_task_index
    t_max = spec.iterations or schedule.t_max
    if options.warm_start and task_index == 1:
        t_max = int(t_max * options.warm_start_factor)
    t_0, t_init = schedule.t_0, schedule.t_init
    if not (t_init < t_max - t_0 < t_max):
        raise ValueError("iteration budget violates the schedule invariant")

    if spec.appearance_id not in model.store.appearance_ids:
        model.store.register_appearance(spec.appearance_id)
    state.appearance_map[task_index] = spec.appearance_id

    use_replay = task_index > 1 and not options.naive_finetune
    teacher = None
    teacher_cache = {}
    if use_replay:
        if len(state.replay) == 0:
            raise MissingTeacherError("no replay records available for task > 1")
        teacher = copy.deepcopy(model)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher_cache = _prerender_teacher(teacher, state.replay, options)

    apply_phase2 = not (options.naive_finetune or options.disable_pose_distill)
    perceptual = get_perceptual(options.perceptual)
    _unfreeze_all(model)
    opt = _make_optimizer(model, schedule)
    np_rng = np.random.default_rng([schedule.seed, task_index])
    torch_gen = torch.Generator().manual_seed(schedule.seed * 7919 + task_index)
    past_by_task = {t: state.replay.by_task(t) for t in state.replay.task_indices}
    record_offsets = {}
    off = 0
    for t in state.replay.task_indices:
        record_offsets[t] = off
        off += len(past_by_task[t])

    log_rows = []
    lam_1, lam_2, lam_beta = schedule.lambda_1, schedule.lambda_2, schedule.lambda_beta
    for t in range(t_max):
        phase = 2 if (apply_phase2 and t >= t_max - t_0) else 1
        if phase == 2 and t == t_max - t_0:
            _freeze_for_phase2(model)

        img = spec.images[int(np_rng.integers(len(spec.images)))]
        ctx = model.prepare(img.pose, spec.appearance_id)
        cur = R.render_patch_batch(model, img.camera, img.pose, spec.appearance_id,
                                   options.patch_current, rng=np_rng,
                                   n_samples=options.n_samples_train, mode="train",
                                   target_image=img.image,
                                   background=options.background,
                                   sample_rng=torch_gen, evaluator=ctx)
        l_cr = L.loss_current(cur.predicted, cur.targets, lambda_2=lam_2,
                              perceptual=perceptual)

        l_cl = None
        l_pose = None
        lam_p = 0.0
        if use_replay:
            past_task = int(np_rng.choice(state.replay.task_indices))
            recs = past_by_task[past_task]
            ridx = int(np_rng.integers(len(recs)))
            rec = recs[ridx]
            teacher_img, teacher_res = teacher_cache[record_offsets[past_task] + ridx]
            lam_p = L.lambda_p(t, t_init, t_max, t_0)
            pctx = model.prepare(rec.pose, rec.appearance_id)
            past = R.render_patch_batch(model, rec.camera, rec.pose, rec.appearance_id,
                                        options.patch_past, rng=np_rng,
                                        n_samples=options.n_samples_train, mode="eval",
                                        target_image=teacher_img,
                                        background=options.background,
                                        evaluator=pctx)
            l_cl = L.loss_replay(past.predicted, past.targets, lambda_2=lam_2,
                                 perceptual=perceptual)
            if phase == 2 and model.pose_net is not None and teacher_res is not None:
                student_res = model.pose_net.residual(rec.pose)
                l_pose = L.loss_pose(student_res, teacher_res)

        total = lam_1 * l_cr
        if l_cl is not None:
            total = total + lam_p * l_cl
        if l_pose is not None:
            total = total + lam_beta * l_pose

        opt.zero_grad(set_to_none=True)
        if total.requires_grad:   # all-background batches are constants
            total.backward()
            opt.step()

        f_cr, f_cl, f_pose, f_tot = (_scalar(x) for x in (l_cr, l_cl, l_pose, total))
        log_rows.append((t, f_cr, f_cl or 0.0, f_pose or 0.0, lam_p, phase))
        state.last_step_terms = {
            "iteration": t, "l_cr": f_cr, "l_cl": f_cl, "l_pose": f_pose,
            "lambda_p": lam_p, "lambda_1": lam_1, "lambda_beta": lam_beta,
            "phase": phase, "total": f_tot,
        }

    _unfreeze_all(model)
    for img in spec.images:
        state.replay.append(ReplayRecord(task_index=task_index,
                                         appearance_id=spec.appearance_id,
                                         camera=img.camera, pose=img.pose))
    state.loss_log = log_rows
    if log_dir is not None:
        _write_loss_csv(os.path.join(os.fspath(log_dir), f"task_{task_index:02d}.csv"), log_rows)

    ckpt = _make_checkpoint(state, task_index, schedule, options, np_rng, torch_gen)
    state.next_task_index = task_index + 1
    return ckpt


def train_joint(state: TrainerState, specs: list, schedule: L.TrainSchedule,
                options: Optional[TrainOptions] = None,
                log_dir=None) -> ckpt_io.TaskCheckpoint:
    """Pooled upper-bound baseline: all tasks' data together, one run.

    The iteration budget is tasks x t_max and each iteration mirrors
    the sequential runs' data exposure: tasks take turns supplying the
    main patch batch, and a second independent draw supplies a
    replay-sized batch whose task weights equal the sequential
    protocol's replay exposure (earlier tasks are revisited more), so
    every task receives the same ray budget as in the sequential runs;
    there is no teacher and no phase 2.
    """
    options = options or TrainOptions()
    model = state.model
    if state.next_task_index != 1:
        raise ValueError("joint training starts from a fresh state")
    for i, spec in enumerate(specs):
        if spec.appearance_id not in model.store.appearance_ids:
            model.store.register_appearance(spec.appearance_id)
        state.appearance_map[i + 1] = spec.appearance_id
    perceptual = get_perceptual(options.perceptual)
    _unfreeze_all(model)
    opt = _make_optimizer(model, schedule)
    np_rng = np.random.default_rng([schedule.seed, 0])
    torch_gen = torch.Generator().manual_seed(schedule.seed * 7919)
    budget = schedule.t_max * len(specs)
    # expected replay draws per task in the sequential protocol: task i
    # is revisited during every later task j, sharing that task's budget
    # with j - 1 peers
    n = len(specs)
    exposure = np.array([sum(1.0 / j for j in range(i + 1, n)) for i in range(n)])
    second_draw = exposure.sum() > 0
    if second_draw:
        exposure = exposure / exposure.sum()
    log_rows = []
    for t in range(budget):
        batches = [(options.patch_current, specs[t % n], "train")]
        if second_draw:
            batches.append((options.patch_past,
                            specs[int(np_rng.choice(n, p=exposure))], "eval"))
        l_cr = None
        for patches, spec, mode in batches:
            img = spec.images[int(np_rng.integers(len(spec.images)))]
            ctx = model.prepare(img.pose, spec.appearance_id)
            cur = R.render_patch_batch(model, img.camera, img.pose, spec.appearance_id,
                                       patches, rng=np_rng,
                                       n_samples=options.n_samples_train, mode=mode,
                                       target_image=img.image,
                                       background=options.background,
                                       sample_rng=torch_gen, evaluator=ctx)
            term = L.loss_current(cur.predicted, cur.targets, lambda_2=schedule.lambda_2,
                                  perceptual=perceptual)
            l_cr = term if l_cr is None else l_cr + term
        total = schedule.lambda_1 * l_cr
        opt.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            opt.step()
        log_rows.append((t, _scalar(l_cr), 0.0, 0.0, 0.0, 1))
    state.loss_log = log_rows
    if log_dir is not None:
        _write_loss_csv(os.path.join(os.fspath(log_dir), "joint.csv"), log_rows)
    task_index = len(specs)
    state.next_task_index = task_index + 1
    return _make_checkpoint(state, task_index, schedule, options, np_rng, torch_gen)


def _write_loss_csv(path, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "L_CR", "L_CL", "L_POSE", "lambda_p", "phase"])
        for r in rows:
            w.writerow([r[0], f"{r[1]:.6g}", f"{r[2]:.6g}", f"{r[3]:.6g}",
                        f"{r[4]:.6g}", r[5]])


def _make_checkpoint(state: TrainerState, task_index: int, schedule: L.TrainSchedule,
                     options: TrainOptions, np_rng, torch_gen) -> ckpt_io.TaskCheckpoint:
    return ckpt_io.TaskCheckpoint(
        task_index=task_index,
        params=ckpt_io.state_to_arrays(state.model),
        appearance_map=dict(state.appearance_map),
        replay_records=state.replay.to_json_list(),
        schedule=schedule.__dict__.copy(),
        options=options.to_json_dict(),
        arch=dict(state.arch),
        rig=state.rig.to_json_dict(),
        rng_state={
            "numpy": repr(np_rng.bit_generator.state),
            "torch": torch_gen.get_state().numpy().tobytes().hex(),
        },
    )


def restore_model(ckpt: ckpt_io.TaskCheckpoint) -> AvatarModel:
    """Rebuild the avatar model a checkpoint describes."""
    rig = SkeletonRig.from_json_dict(ckpt.rig)
    arch = ckpt.arch
    model = build_model(
        rig, width=arch["width"], l_freq=arch["l_freq"],
        triplane_res=arch["triplane_res"], triplane_feat=arch["triplane_feat"],
        generator_channels=arch["generator_channels"], max_frames=arch["max_frames"],
        seed=arch.get("seed", 0),
        use_local_embeddings=arch["use_local_embeddings"],
        use_pose_correction=arch["use_pose_correction"],
    )
    for app_id in sorted(set(ckpt.appearance_map.values())):
        model.store.register_appearance(app_id)
    ckpt_io.load_into_module(model, ckpt.params)
    model.eval()
    return model


def resume_state(ckpt: ckpt_io.TaskCheckpoint, schedule: L.TrainSchedule,
                 arch: dict) -> TrainerState:
    """Rebuild trainer state from a checkpoint to continue the sequence.

    The requested schedule and architecture must match what the
    checkpoint was trained with; a conflict is an error, not a silent
    restart.
    """
    want = {k: arch[k] for k in ckpt.arch if k in arch}
    have = {k: ckpt.arch[k] for k in want}
    if want != have:
        raise ckpt_io.CheckpointError(
            f"architecture mismatch on resume: config {want} vs checkpoint {have}")
    for key in ("t_max", "t_0", "t_init", "seed"):
        if ckpt.schedule.get(key) != getattr(schedule, key):
            raise ckpt_io.CheckpointError(
                f"schedule mismatch on resume: {key}={getattr(schedule, key)} "
                f"vs checkpoint {ckpt.schedule.get(key)}")
    model = restore_model(ckpt)
    model.train()
    state = TrainerState(model, ckpt.arch)
    state.replay = ReplayStore.from_json_list(ckpt.replay_records)
    state.appearance_map = dict(ckpt.appearance_map)
    state.next_task_index = ckpt.task_index + 1
    return state


def render_from_task(ckpt, task_index: int, camera: CameraParams, pose: BodyPose,
                     n_samples: Optional[int] = None, model: Optional[AvatarModel] = None) -> np.ndarray:
    """Render a historical appearance with the single current model.

    Deterministic evaluation sampling; task_index must be one of the
    tasks the checkpoint has trained on.
    """
    if task_index not in ckpt.appearance_map:
        raise UnknownTaskError(f"task {task_index} not in checkpoint "
                               f"(has {sorted(ckpt.appearance_map)})")
    if model is None:
        model = restore_model(ckpt)
    if n_samples is None:
        n_samples = int(ckpt.options.get("n_samples_eval", 32))
    appearance_id = ckpt.appearance_map[task_index]
    with torch.no_grad():
        return R.render_image(model, camera, pose, appearance_id,
                              n_samples=n_samples, mode="eval",
                              background=float(ckpt.options.get("background", 1.0)))
