"""Procedural capsule-figure benchmark world.

A small articulated figure made of capsules stands in for real capture
data: an analytic ray-capsule renderer produces exact ground-truth
images (flat per-part albedo, one fixed light, white background), and a
task-sequence builder emits few-shot training splits plus held-out
novel-view / novel-pose evaluation splits per appearance.

Everything here is numpy on purpose: the oracle shares no code with the
differentiable model path it is used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .render import CameraParams, look_at_camera
from .skeleton import BodyPose, SkeletonRig


# ---------------------------------------------------------------------------
# default rig: torso root, head, two-segment arms, legs (K = 8)


def build_default_rig(grid_res: int = 32) -> SkeletonRig:
    joints = [
        [0.0, 0.0, 0.0],      # 0 torso (root)
        [0.0, 0.50, 0.0],     # 1 head
        [0.18, 0.45, 0.0],    # 2 left upper arm
        [0.46, 0.45, 0.0],    # 3 left lower arm
        [-0.18, 0.45, 0.0],   # 4 right upper arm
        [-0.46, 0.45, 0.0],   # 5 right lower arm
        [0.10, 0.0, 0.0],     # 6 left leg
        [-0.10, 0.0, 0.0],    # 7 right leg
    ]
    tips = [
        [0.0, 0.50, 0.0],
        [0.0, 0.78, 0.0],
        [0.46, 0.45, 0.0],
        [0.74, 0.45, 0.0],
        [-0.46, 0.45, 0.0],
        [-0.74, 0.45, 0.0],
        [0.10, -0.62, 0.0],
        [-0.10, -0.62, 0.0],
    ]
    radii = [0.18, 0.14, 0.06, 0.05, 0.06, 0.05, 0.08, 0.08]
    parents = [-1, 0, 0, 2, 0, 4, 0, 0]
    bounds = [[-0.95, -0.85, -0.45], [0.95, 1.05, 0.45]]
    return SkeletonRig(
        bone_count=8, rest_joints=joints, rest_tips=tips, bone_radii=radii,
        parent_index=parents, bounds=bounds, grid_res=grid_res,
    )


PART_NAMES = ["torso", "head", "l_upper_arm", "l_lower_arm",
              "r_upper_arm", "r_lower_arm", "l_leg", "r_leg"]
TORSO_PART = 0

# base hues for named task palettes; kept saturated so appearance swaps
# move every channel, not just a tint
_PALETTE_BASES = {
    "green": (0.10, 0.68, 0.16),
    "yellow": (0.94, 0.80, 0.06),
    "blue": (0.12, 0.30, 0.90),
    "red": (0.86, 0.15, 0.12),
    "purple": (0.58, 0.20, 0.76),
    "teal": (0.06, 0.66, 0.62),
}


def named_palette(name: str) -> np.ndarray:
    """Per-part albedos derived from one base hue; torso carries it pure."""
    if name not in _PALETTE_BASES:
        raise KeyError(f"unknown palette {name!r}; choose from {sorted(_PALETTE_BASES)}")
    base = np.asarray(_PALETTE_BASES[name], dtype=np.float64)
    skin = np.array([0.87, 0.72, 0.58])
    head = np.clip(skin * 0.45 + base * 0.55, 0.0, 1.0)
    arms = np.clip(base * 0.85 + 0.08, 0.0, 1.0)
    fore = np.clip(base * 0.70 + 0.15, 0.0, 1.0)
    legs = np.clip(base * 0.50 + 0.05, 0.0, 1.0)
    return np.stack([base, head, arms, fore, arms, fore, legs, legs])


@dataclass
class SynthAvatarSpec:
    """Figure geometry plus one appearance's per-part albedo palette."""

    rig: SkeletonRig
    palette: np.ndarray                      # (K, 3) in [0, 1]
    radius_scale: Optional[np.ndarray] = None  # (K,) multiplicative, default ones

    def __post_init__(self):
        self.palette = np.asarray(self.palette, dtype=np.float64)
        if self.palette.shape != (self.rig.bone_count, 3):
            raise ValueError("palette length must equal part count")
        if self.radius_scale is None:
            self.radius_scale = np.ones(self.rig.bone_count)
        self.radius_scale = np.asarray(self.radius_scale, dtype=np.float64)
        if (self.radius_scale <= 0).any() or (np.asarray(self.rig.bone_radii) <= 0).any():
            raise ValueError("capsule radii must be positive")

    @property
    def radii(self) -> np.ndarray:
        return np.asarray(self.rig.bone_radii, dtype=np.float64) * self.radius_scale


LIGHT_DIR = np.array([0.35, 0.75, -0.55])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35


# -- numpy forward kinematics (independent of the torch model path) ---------


def _quat_to_matrix_np(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _rotvec_to_quat_np(v: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def _quat_mul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def fk_posed_joints(rig: SkeletonRig, rotations: np.ndarray) -> np.ndarray:
    """Posed joint positions for local rotations via plain numpy FK."""
    k = rig.bone_count
    rest = np.asarray(rig.rest_joints, dtype=np.float64)
    world = [None] * k
    joints = np.zeros((k, 3))
    for i in rig.topo_order:
        local = _quat_to_matrix_np(rotations[i])
        p = rig.parent_index[i]
        if p < 0:
            world[i] = local
            joints[i] = rest[i]
        else:
            world[i] = world[p] @ local
            joints[i] = world[p] @ (rest[i] - rest[p]) + joints[p]
    return joints


def fk_posed_segments(rig: SkeletonRig, pose: BodyPose):
    """Posed capsule endpoints (starts, ends) from a pose's J and chained Omega."""
    k = rig.bone_count
    rot = pose.rotations.detach().numpy().astype(np.float64)
    rest = np.asarray(rig.rest_joints, dtype=np.float64)
    tips_rest = np.asarray(rig.rest_tips, dtype=np.float64)
    joints = pose.joints.detach().numpy().astype(np.float64)
    world = [None] * k
    tips = np.zeros((k, 3))
    for i in rig.topo_order:
        local = _quat_to_matrix_np(rot[i])
        p = rig.parent_index[i]
        world[i] = local if p < 0 else world[p] @ local
        tips[i] = world[i] @ (tips_rest[i] - rest[i]) + joints[i]
    return joints, tips


# -- analytic ray-capsule tracing --------------------------------------------


def _ray_capsule(o: np.ndarray, d: np.ndarray, a: np.ndarray, b: np.ndarray, r: float):
    """Nearest positive hit parameter per ray against one capsule, inf on miss.

    o, d are (N, 3); returns (N,) float.
    """
    ab = b - a
    length = float(np.linalg.norm(ab))
    t_best = np.full(o.shape[0], np.inf)
    if length > 1e-12:
        u = ab / length
        oc = o - a
        d_par = d @ u
        oc_par = oc @ u
        d_perp = d - d_par[:, None] * u
        oc_perp = oc - oc_par[:, None] * u
        qa = (d_perp * d_perp).sum(-1)
        qb = 2.0 * (d_perp * oc_perp).sum(-1)
        qc = (oc_perp * oc_perp).sum(-1) - r * r
        disc = qb * qb - 4 * qa * qc
        ok = (disc >= 0) & (qa > 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for sign in (-1.0, 1.0):
            t = np.where(ok, (-qb + sign * sq) / (2 * np.clip(qa, 1e-12, None)), np.inf)
            s = oc_par + t * d_par
            good = ok & (t > 1e-6) & (s >= 0.0) & (s <= length)
            t_best = np.where(good & (t < t_best), t, t_best)
    for cap in (a, b):
        oc = o - cap
        qb = 2.0 * (d * oc).sum(-1)
        qc = (oc * oc).sum(-1) - r * r
        disc = qb * qb - 4 * qc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for sign in (-1.0, 1.0):
            t = np.where(ok, (-qb + sign * sq) / 2.0, np.inf)
            good = ok & (t > 1e-6)
            t_best = np.where(good & (t < t_best), t, t_best)
    return t_best


def _camera_rays_np(camera: CameraParams):
    w, h = camera.width, camera.height
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    d_cam = np.stack(
        [(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)],
        axis=-1,
    ).reshape(-1, 3)
    rot = camera.rotation.numpy().astype(np.float64)
    d = d_cam @ rot.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.translation.numpy().astype(np.float64), d.shape)
    return o, d


def trace_parts(spec: SynthAvatarSpec, camera: CameraParams, pose: BodyPose):
    """Per-pixel nearest part index (-1 for background) and hit distance."""
    o, d = _camera_rays_np(camera)
    seg_a, seg_b = fk_posed_segments(spec.rig, pose)
    radii = spec.radii
    n = o.shape[0]
    best_t = np.full(n, np.inf)
    best_k = np.full(n, -1, dtype=np.int64)
    for k in range(spec.rig.bone_count):
        t = _ray_capsule(o, d, seg_a[k], seg_b[k], float(radii[k]))
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_k = np.where(closer, k, best_k)
    h, w = camera.height, camera.width
    return best_k.reshape(h, w), best_t.reshape(h, w)


def oracle_render(spec: SynthAvatarSpec, camera: CameraParams, pose: BodyPose) -> np.ndarray:
    """Exact reference image: per-part albedo, Lambert + ambient, white bg."""
    o, d = _camera_rays_np(camera)
    seg_a, seg_b = fk_posed_segments(spec.rig, pose)
    radii = spec.radii
    part, t_hit = trace_parts(spec, camera, pose)
    part_f, t_f = part.reshape(-1), t_hit.reshape(-1)
    img = np.ones((o.shape[0], 3))
    hit = part_f >= 0
    if hit.any():
        p = o[hit] + t_f[hit, None] * d[hit]
        k = part_f[hit]
        a, b = seg_a[k], seg_b[k]
        ab = b - a
        denom = np.clip((ab * ab).sum(-1), 1e-12, None)
        s = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
        closest = a + s[:, None] * ab
        normal = p - closest
        normal /= np.clip(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-12, None)
        lambert = np.clip(normal @ LIGHT_DIR, 0.0, None)
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
        img[hit] = spec.palette[k] * shade[:, None]
    return np.clip(img.reshape(camera.height, camera.width, 3), 0.0, 1.0)


# ---------------------------------------------------------------------------
# pose sampling and task sequences


# per-joint rotation-vector amplitude (radians) used by the pose sampler
_POSE_AMPLITUDE = np.array([
    [0.05, 0.25, 0.08],   # torso: mostly turns about y
    [0.20, 0.10, 0.10],   # head nod / tilt
    [0.25, 0.05, 0.45],   # upper arms swing about z, a little about x
    [0.20, 0.05, 0.50],
    [0.25, 0.05, 0.45],
    [0.20, 0.05, 0.50],
    [0.35, 0.05, 0.15],   # legs swing about x
    [0.35, 0.05, 0.15],
])


def sample_pose(rig: SkeletonRig, rng: np.random.Generator,
                frame_tag: Optional[int] = None, noise_std: float = 0.0):
    """Draw a random true pose; optionally return a noisy recorded copy.

    Returns (true_pose, recorded_pose).  The recorded pose keeps the
    exact joint positions but perturbs each rotation by a small random
    rotation (std `noise_std` radians per axis), imitating imperfect
    pose estimates; ground-truth images must be rendered from the true
    pose only.
    """
    k = rig.bone_count
    amp = _POSE_AMPLITUDE[:k] if k <= len(_POSE_AMPLITUDE) else np.tile([0.2, 0.2, 0.2], (k, 1))
    rotvecs = rng.uniform(-1.0, 1.0, size=(k, 3)) * amp
    quats = np.stack([_rotvec_to_quat_np(v) for v in rotvecs])
    joints = fk_posed_joints(rig, quats)
    true_pose = BodyPose(joints=torch.tensor(joints, dtype=torch.float32),
                         rotations=torch.tensor(quats, dtype=torch.float32),
                         frame_tag=frame_tag)
    if noise_std <= 0:
        return true_pose, true_pose
    noisy = np.stack([
        _quat_mul_np(_rotvec_to_quat_np(rng.normal(0.0, noise_std, size=3)), q)
        for q in quats
    ])
    recorded = BodyPose(joints=true_pose.joints.clone(),
                        rotations=torch.tensor(noisy, dtype=torch.float32),
                        frame_tag=frame_tag)
    return true_pose, recorded


def orbit_camera(azimuth_deg: float, elevation_deg: float = 12.0,
                 distance: float = 2.2, target=(0.0, 0.1, 0.0),
                 image_size: int = 64, fov_deg: float = 40.0) -> CameraParams:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    eye = (
        target[0] + distance * math.cos(el) * math.sin(az),
        target[1] + distance * math.sin(el),
        target[2] + distance * math.cos(el) * math.cos(az),
    )
    return look_at_camera(eye, target, width=image_size, height=image_size, fov_deg=fov_deg)


@dataclass
class SynthRecord:
    image: np.ndarray
    camera: CameraParams
    pose: BodyPose
    split: str
    frame_tag: Optional[int] = None


@dataclass
class SynthTaskData:
    appearance_id: int
    palette_name: str
    spec: Optional[SynthAvatarSpec]   # None once loaded back from disk
    train: list = field(default_factory=list)
    eval_novel_view: list = field(default_factory=list)
    eval_novel_pose: list = field(default_factory=list)

    @property
    def eval_records(self):
        return list(self.eval_novel_view) + list(self.eval_novel_pose)


MIN_AZIMUTH_GAP_DEG = 60.0

# default per-task capsule-radius multipliers: appearance swaps carry a
# mild body-shape change alongside the palette; must stay within the
# model's culling envelope (radius * 1.4)
AUTO_RADIUS_CYCLE = (1.0, 0.85, 1.15, 0.9, 1.1, 0.95, 1.05)


def make_task_sequence(base_rig: SkeletonRig, palettes, views_per_task: int = 5,
                       poses_per_task: Optional[int] = None, seed: int = 42,
                       image_size: int = 64, eval_views: int = 2,
                       eval_poses: int = 2, pose_noise: float = 0.05,
                       radius_scales="auto") -> list:
    """Build one few-shot task per palette with held-out eval splits.

    Training views are azimuths spaced 360/views apart (>= 60 degrees
    required), each with its own sampled pose; eval cameras sit between
    training azimuths at a different elevation.  Novel-view eval reuses
    a training pose, novel-pose eval draws fresh ones; both use exact
    (noise-free) poses.

    radius_scales: "auto" cycles mild per-task body-shape deltas; pass a
    per-task list (scalars or (K,) arrays) to pin them, or None for pure
    palette swaps.
    """
    if len(palettes) < 1:
        raise ValueError("need at least one palette")
    if isinstance(radius_scales, str):
        if radius_scales != "auto":
            raise ValueError("radius_scales must be 'auto', None, or a per-task list")
        radius_scales = [AUTO_RADIUS_CYCLE[i % len(AUTO_RADIUS_CYCLE)]
                         for i in range(len(palettes))]
    elif radius_scales is not None and len(radius_scales) != len(palettes):
        raise ValueError("radius_scales needs one entry per palette")
    if poses_per_task is None:
        poses_per_task = views_per_task
    spacing = 360.0 / views_per_task
    if spacing < MIN_AZIMUTH_GAP_DEG - 1e-9:
        raise ValueError(
            f"infeasible view spread: {views_per_task} views cannot keep "
            f"{MIN_AZIMUTH_GAP_DEG} degree azimuth gaps"
        )
    tasks = []
    frame_counter = 0
    for t_idx, palette in enumerate(palettes):
        rng = np.random.default_rng([seed, t_idx])
        if isinstance(palette, str):
            name, colors = palette, named_palette(palette)
        else:
            name, colors = f"custom{t_idx}", np.asarray(palette)
        scale = None if radius_scales is None else radius_scales[t_idx]
        spec = SynthAvatarSpec(rig=base_rig, palette=colors, radius_scale=scale)
        offset = float(rng.uniform(0.0, spacing))
        poses = []
        for i in range(poses_per_task):
            poses.append(sample_pose(base_rig, rng, frame_tag=None, noise_std=pose_noise))
        task = SynthTaskData(appearance_id=t_idx, palette_name=name, spec=spec)
        for v in range(views_per_task):
            cam = orbit_camera(offset + v * spacing, image_size=image_size)
            true_pose, recorded = poses[v % poses_per_task]
            recorded = BodyPose(joints=recorded.joints, rotations=recorded.rotations,
                                frame_tag=frame_counter)
            img = oracle_render(spec, cam, true_pose)
            task.train.append(SynthRecord(img, cam, recorded, "train", frame_counter))
            frame_counter += 1
        for e in range(eval_views):
            az = offset + (e * max(1, views_per_task // eval_views) + 0.5) * spacing
            cam = orbit_camera(az, elevation_deg=18.0, image_size=image_size)
            true_pose, _ = poses[e % poses_per_task]
            pose = BodyPose(joints=true_pose.joints, rotations=true_pose.rotations)
            img = oracle_render(spec, cam, pose)
            task.eval_novel_view.append(SynthRecord(img, cam, pose, "eval_novel_view"))
        for e in range(eval_poses):
            az = offset + (e * max(1, views_per_task // eval_poses) + 0.5) * spacing
            cam = orbit_camera(az, elevation_deg=18.0, image_size=image_size)
            fresh, _ = sample_pose(base_rig, rng, noise_std=0.0)
            img = oracle_render(spec, cam, fresh)
            task.eval_novel_pose.append(SynthRecord(img, cam, fresh, "eval_novel_pose"))
        tasks.append(task)
    return tasks
