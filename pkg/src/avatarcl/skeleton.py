"""Articulated-skeleton kinematics and inverse linear blend skinning.

The model lives in a canonical space; each observed (posed) point is
pulled back into it by blending per-bone rigid inverse transforms with
weights read from a trainable canonical voxel field.  A small MLP
("pose correction") refines the per-joint rotations before any warping
happens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from . import rotations


# ---------------------------------------------------------------------------
# rig / pose / transform types


@dataclass
class SkeletonRig:
    """Static skeleton description plus its canonical weight field.

    rest_joints are the proximal ends of each bone in canonical space,
    rest_tips the distal ends; bone k occupies the capsule
    (rest_joints[k] -> rest_tips[k], radius bone_radii[k]).
    """

    bone_count: int
    rest_joints: torch.Tensor          # (K, 3)
    rest_tips: torch.Tensor            # (K, 3)
    bone_radii: torch.Tensor           # (K,)
    parent_index: list                 # K ints, -1 for root
    bounds: torch.Tensor               # (2, 3) canonical box lo/hi
    grid_res: int = 32
    weight_field: Optional["WeightField"] = None
    topo_order: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        k = self.bone_count
        if k < 1:
            raise ValueError("bone_count must be >= 1")
        self.rest_joints = torch.as_tensor(self.rest_joints, dtype=torch.float32).reshape(k, 3)
        self.rest_tips = torch.as_tensor(self.rest_tips, dtype=torch.float32).reshape(k, 3)
        self.bone_radii = torch.as_tensor(self.bone_radii, dtype=torch.float32).reshape(k)
        self.bounds = torch.as_tensor(self.bounds, dtype=torch.float32).reshape(2, 3)
        self.parent_index = [int(p) for p in self.parent_index]
        if len(self.parent_index) != k:
            raise ValueError("parent_index length must equal bone_count")
        roots = [i for i, p in enumerate(self.parent_index) if p == -1]
        if len(roots) != 1:
            raise ValueError("parent graph must have exactly one root")
        # walk parents to detect cycles and build a parents-first order
        order, seen = [], set()
        def visit(i, trail):
            if i in trail:
                raise ValueError("parent graph contains a cycle")
            if i in seen:
                return
            p = self.parent_index[i]
            if p >= 0:
                visit(p, trail | {i})
            seen.add(i)
            order.append(i)
        for i in range(k):
            visit(i, frozenset())
        self.topo_order = order
        if self.weight_field is None:
            self.weight_field = WeightField.init_from_rig(self)

    @property
    def box_diagonal(self) -> float:
        return float((self.bounds[1] - self.bounds[0]).norm())

    def to_json_dict(self) -> dict:
        return {
            "bone_count": self.bone_count,
            "rest_joints": self.rest_joints.tolist(),
            "rest_tips": self.rest_tips.tolist(),
            "bone_radii": self.bone_radii.tolist(),
            "parent_index": list(self.parent_index),
            "bounds": self.bounds.tolist(),
            "grid_res": self.grid_res,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "SkeletonRig":
        return SkeletonRig(
            bone_count=int(d["bone_count"]),
            rest_joints=d["rest_joints"],
            rest_tips=d["rest_tips"],
            bone_radii=d["bone_radii"],
            parent_index=d["parent_index"],
            bounds=d["bounds"],
            grid_res=int(d.get("grid_res", 32)),
        )


def save_rig(rig: SkeletonRig, path) -> None:
    with open(path, "w") as f:
        json.dump(rig.to_json_dict(), f, indent=1)


def load_rig(path) -> SkeletonRig:
    with open(path) as f:
        return SkeletonRig.from_json_dict(json.load(f))


@dataclass
class BodyPose:
    """Posed joint positions plus per-joint local rotations.

    Rotations are unit quaternions internally; (K, 3) axis-angle input
    is accepted and converted.  frame_tag identifies the training frame
    for the pose-correction MLP; None means "unknown frame".
    """

    joints: torch.Tensor       # (K, 3)
    rotations: torch.Tensor    # (K, 4) unit quaternions
    frame_tag: Optional[int] = None

    def __post_init__(self):
        self.joints = torch.as_tensor(self.joints, dtype=torch.float32)
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise ValueError("joints must be (K, 3)")
        k = self.joints.shape[0]
        if isinstance(self.rotations, torch.Tensor) and self.rotations.is_floating_point():
            dtype = self.rotations.dtype
        else:
            dtype = torch.float32
        self.rotations = rotations.as_pose_rotations(self.rotations, k, dtype=dtype)

    @property
    def bone_count(self) -> int:
        return self.joints.shape[0]

    def to_json_dict(self) -> dict:
        d = {"joints": self.joints.tolist(), "rotations": self.rotations.tolist()}
        if self.frame_tag is not None:
            d["frame_tag"] = int(self.frame_tag)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "BodyPose":
        return BodyPose(
            joints=torch.tensor(d["joints"], dtype=torch.float32),
            rotations=torch.tensor(d["rotations"], dtype=torch.float32),
            frame_tag=d.get("frame_tag"),
        )


@dataclass
class BoneTransformSet:
    """Per-bone rigid maps from observed space to canonical space."""

    rotations: torch.Tensor     # (K, 3, 3)
    translations: torch.Tensor  # (K, 3)

    def __post_init__(self):
        r = self.rotations
        eye = torch.eye(3, dtype=r.dtype)
        if (r.transpose(-1, -2) @ r - eye).abs().max() > 1e-5:
            raise ValueError("rotations must be orthonormal")
        if (torch.det(r) - 1.0).abs().max() > 1e-5:
            raise ValueError("rotations must be proper (det +1)")


# ---------------------------------------------------------------------------
# canonical weight field


class WeightField(nn.Module):
    """Trainable canonical skinning weights on a dense K x G^3 voxel grid.

    Weights are stored in log space so they stay positive; lookups are
    trilinear inside the canonical box and exactly zero outside it.
    """

    def __init__(self, log_weights: torch.Tensor, bounds: torch.Tensor, trainable: bool = True):
        super().__init__()
        self.log_weights = nn.Parameter(log_weights, requires_grad=trainable)
        self.register_buffer("bounds", torch.as_tensor(bounds, dtype=log_weights.dtype).reshape(2, 3))
        self.trainable = trainable

    @staticmethod
    def init_from_rig(rig: SkeletonRig, temperature_frac: float = 0.1, trainable: bool = True) -> "WeightField":
        """Softmax over negative squared point-to-bone-segment distance."""
        g = rig.grid_res
        lo, hi = rig.bounds[0], rig.bounds[1]
        axes = [torch.linspace(lo[d], hi[d], g) for d in range(3)]
        # grid tensor axes are (z, y, x) so grid_sample's (x, y, z)
        # coordinate convention lines up
        zz, yy, xx = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        pts = torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)
        d2 = _point_segment_distance(pts, rig.rest_joints, rig.rest_tips) ** 2  # (N, K)
        tau = temperature_frac * rig.box_diagonal
        logw = torch.log_softmax(-d2 / tau, dim=-1)
        logw = logw.reshape(g, g, g, rig.bone_count).permute(3, 0, 1, 2).contiguous()
        return WeightField(logw, rig.bounds, trainable=trainable)

    @property
    def weights(self) -> torch.Tensor:
        """Effective nonnegative weight grid, shape (K, G, G, G)."""
        return self.log_weights.exp()

    def _normalized(self, pts: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bounds[0], self.bounds[1]
        return 2.0 * (pts - lo) / (hi - lo) - 1.0

    def sample(self, pts: torch.Tensor) -> torch.Tensor:
        """All K channels at each point: (N, 3) -> (N, K), zero outside box."""
        k = self.log_weights.shape[0]
        u = self._normalized(pts)
        inside = (u.abs() <= 1.0).all(dim=-1)
        grid = u.reshape(1, -1, 1, 1, 3)
        out = torch.nn.functional.grid_sample(
            self.weights[None], grid, mode="bilinear",
            padding_mode="zeros", align_corners=True,
        )
        out = out.reshape(k, -1).T
        return out * inside[:, None]

    def sample_per_bone(self, pts: torch.Tensor) -> torch.Tensor:
        """Channel k at its own point: (K, N, 3) -> (K, N), zero outside box."""
        k, n = pts.shape[0], pts.shape[1]
        u = self._normalized(pts)
        inside = (u.abs() <= 1.0).all(dim=-1)
        grid = u.reshape(k, n, 1, 1, 3)
        out = torch.nn.functional.grid_sample(
            self.weights[:, None], grid, mode="bilinear",
            padding_mode="zeros", align_corners=True,
        )
        return out.reshape(k, n) * inside


def _point_segment_distance(pts: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Distance from each point to each segment: (N,3),(K,3),(K,3) -> (N,K)."""
    ab = b - a                                     # (K, 3)
    ap = pts[:, None, :] - a[None]                 # (N, K, 3)
    denom = (ab * ab).sum(-1).clamp_min(1e-12)
    t = ((ap * ab[None]).sum(-1) / denom).clamp(0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return (pts[:, None, :] - closest).norm(dim=-1)


# ---------------------------------------------------------------------------
# forward kinematics and inverse bone transforms


def world_rotations(rig: SkeletonRig, pose: BodyPose) -> torch.Tensor:
    """Accumulated world rotation per bone, parents first: (K, 3, 3)."""
    local = rotations.to_matrix(pose.rotations)
    world = [None] * rig.bone_count
    for i in rig.topo_order:
        p = rig.parent_index[i]
        world[i] = local[i] if p < 0 else world[p] @ local[i]
    return torch.stack(world)


def bone_transforms(rig: SkeletonRig, pose: BodyPose,
                    world: Optional[torch.Tensor] = None) -> BoneTransformSet:
    """Per-bone rigid maps sending observed points to canonical space.

    Forward kinematics places bone k with world rotation W_k about its
    posed joint position: x_obs = W_k (x_can - rest_joint_k) + J_k.
    The returned set is the inverse, R_k = W_k^T and
    t_k = rest_joint_k - W_k^T J_k.  `world` lets callers that already
    ran FK skip recomputing the accumulated rotations.
    """
    if pose.bone_count != rig.bone_count:
        raise ValueError("pose bone count does not match rig")
    w = world_rotations(rig, pose) if world is None else world
    dtype = w.dtype
    rest = rig.rest_joints.to(dtype)
    joints = pose.joints.to(dtype)
    r = w.transpose(-1, -2)
    t = rest - (r @ joints[..., None]).squeeze(-1)
    return BoneTransformSet(rotations=r, translations=t)


def posed_segments(rig: SkeletonRig, pose: BodyPose,
                   world: Optional[torch.Tensor] = None):
    """Posed capsule segments (starts, ends), each (K, 3)."""
    w = world_rotations(rig, pose) if world is None else world
    tips = pose.joints + (w @ (rig.rest_tips - rig.rest_joints)[..., None]).squeeze(-1)
    return pose.joints, tips


def bounding_sphere(rig: SkeletonRig, pose: BodyPose, margin: float = 0.05,
                    segments=None):
    """(center, radius) enclosing all posed capsules plus a margin."""
    a, b = posed_segments(rig, pose) if segments is None else segments
    pts = torch.cat([a, b], dim=0)
    center = pts.mean(dim=0)
    radius = (pts - center).norm(dim=-1).max() + rig.bone_radii.max() + margin
    return center, float(radius)


def in_body(rig: SkeletonRig, pose: BodyPose, pts: torch.Tensor, dilation: float = 1.0,
            segments=None) -> torch.Tensor:
    """True where an observed point lies inside some posed bone capsule."""
    a, b = posed_segments(rig, pose) if segments is None else segments
    d = _point_segment_distance(pts, a.to(pts.dtype), b.to(pts.dtype))
    return (d <= rig.bone_radii.to(pts.dtype) * dilation).any(dim=-1)


# ---------------------------------------------------------------------------
# observed-space weights and the skeletal warp


def observed_weights(rig: SkeletonRig, transforms: BoneTransformSet, pts: torch.Tensor,
                     cand: Optional[torch.Tensor] = None):
    """Normalized observed-space skinning weights for a batch of points.

    Returns (weights (N, K), valid (N,)).  Each bone's canonical weight
    is read at that bone's warped point; rows whose lookups are all zero
    are flagged invalid ("outside body") with a zero weight row.
    `cand` accepts precomputed warped candidates.
    """
    if cand is None:
        cand = warped_candidates(transforms, pts)
    raw = rig.weight_field.sample_per_bone(cand).T       # (N, K)
    total = raw.sum(dim=-1)
    valid = total > 0
    w = raw / total.clamp_min(1e-30)[:, None]
    return w * valid[:, None], valid


def warped_candidates(transforms: BoneTransformSet, pts: torch.Tensor) -> torch.Tensor:
    """Per-bone warped points R_k x + t_k, shape (K, N, 3)."""
    r = transforms.rotations.to(pts.dtype)
    t = transforms.translations.to(pts.dtype)
    return torch.einsum("kij,nj->kni", r, pts) + t[:, None, :]


def observed_weight(rig: SkeletonRig, transforms: BoneTransformSet, x: Sequence[float]) -> torch.Tensor:
    """Single-point convenience wrapper; raises outside the body."""
    pts = torch.as_tensor(x, dtype=torch.float32).reshape(1, 3)
    w, valid = observed_weights(rig, transforms, pts)
    if not bool(valid[0]):
        raise OutsideBodyError("all canonical weight lookups are zero at this point")
    return w[0]


def skeletal_transforms(rig: SkeletonRig, transforms: BoneTransformSet, pts: torch.Tensor):
    """Batched observed -> canonical warp; returns (canonical (N,3), valid (N,))."""
    cand = warped_candidates(transforms, pts)
    w, valid = observed_weights(rig, transforms, pts, cand=cand)
    out = (w.T[..., None] * cand).sum(dim=0)
    return out, valid


def skeletal_transform(rig: SkeletonRig, transforms: BoneTransformSet, x: Sequence[float]) -> torch.Tensor:
    pts = torch.as_tensor(x, dtype=torch.float32).reshape(1, 3)
    out, valid = skeletal_transforms(rig, transforms, pts)
    if not bool(valid[0]):
        raise OutsideBodyError("all canonical weight lookups are zero at this point")
    return out[0]


class OutsideBodyError(ValueError):
    """Raised when a point maps outside the canonical weight support."""


# ---------------------------------------------------------------------------
# pose correction


class PoseCorrectionNet(nn.Module):
    """4-layer MLP predicting per-joint residual rotations.

    Input is the flattened pose quaternions plus a learned per-frame tag
    embedding (zeros for unknown frames); output deltas are added to the
    identity quaternion and normalized, so a zero-initialized final
    layer yields an exact identity residual at init.
    """

    TAG_DIM = 8

    def __init__(self, bone_count: int, hidden: int = 64, max_frames: int = 256):
        super().__init__()
        self.bone_count = bone_count
        self.max_frames = max_frames
        self.frame_tags = nn.Embedding(max_frames, self.TAG_DIM)
        nn.init.zeros_(self.frame_tags.weight)
        d_in = bone_count * 4 + self.TAG_DIM
        self.layers = nn.ModuleList([
            nn.Linear(d_in, hidden),
            nn.Linear(hidden, hidden),
            nn.Linear(hidden, hidden),
            nn.Linear(hidden, bone_count * 4),
        ])
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def residual(self, pose: BodyPose) -> torch.Tensor:
        """Unit-quaternion residual per joint, shape (K, 4)."""
        dtype = self.layers[0].weight.dtype
        q = pose.rotations.to(dtype).reshape(-1)
        if pose.frame_tag is None:
            tag = torch.zeros(self.TAG_DIM, dtype=dtype)
        else:
            idx = torch.tensor(int(pose.frame_tag) % self.max_frames)
            tag = self.frame_tags(idx).to(dtype)
        h = torch.cat([q, tag])
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        delta = self.layers[-1](h).reshape(self.bone_count, 4)
        ident = rotations.identity_quat((self.bone_count,), dtype=dtype)
        return rotations.normalize(ident + delta)


def pose_correct(mlp_p: PoseCorrectionNet, pose: BodyPose) -> BodyPose:
    """Compose the predicted residual onto the pose rotations (left side).

    Joint positions pass through untouched (the same tensor object), so
    they are bitwise identical; only rotations change.
    """
    res = mlp_p.residual(pose)
    corrected = rotations.compose(res, pose.rotations.to(res.dtype))
    out = BodyPose.__new__(BodyPose)
    out.joints = pose.joints
    out.rotations = corrected
    out.frame_tag = pose.frame_tag
    return out
