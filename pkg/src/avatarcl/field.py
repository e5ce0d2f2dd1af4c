"""Canonical radiance field and the full observed-space avatar model.

The field MLP consumes an encoded canonical position plus the global
geometry embedding through an 8-layer trunk (skip connection at layer
4) and emits density plus a feature vector; a 2-layer color head mixes
that feature with the global color embedding and the per-appearance
local tri-plane feature.  Density therefore structurally cannot depend
on any color input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from . import skeleton as sk
from .appearance import AppearanceStore, TriPlaneGrid, query_triplane
from .skeleton import BodyPose, PoseCorrectionNet, SkeletonRig


@dataclass
class FieldSample:
    """Batched field output: color in [0,1], density >= 0."""

    color: torch.Tensor   # (N, 3)
    sigma: torch.Tensor   # (N,)


def encoding_dim(l_freq: int) -> int:
    return 3 * (2 * l_freq + 1)


def positional_encode(x: torch.Tensor, l_freq: int = 10) -> torch.Tensor:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin/cos(2^{L-1} pi x)].

    Input (..., 3) -> output (..., 3 * (2 L + 1)); L=0 returns x as is.
    """
    if l_freq == 0:
        return x
    freqs = (2.0 ** torch.arange(l_freq, dtype=x.dtype, device=x.device)) * math.pi
    ang = x[..., None, :] * freqs[:, None]              # (..., L, 3)
    parts = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-2)  # (..., L, 2, 3)
    return torch.cat([x, parts.reshape(*x.shape[:-1], -1)], dim=-1)


class FieldMLP(nn.Module):
    """8-layer trunk with a skip at layer 4, plus a 2-layer color head."""

    TRUNK_LAYERS = 8
    SKIP_AT = 4

    def __init__(self, encode_dim: int, geom_dim: int = 16, color_dim: int = 48,
                 local_dim: int = 8, width: int = 256):
        super().__init__()
        self.width = width
        d_in = encode_dim + geom_dim
        dims = [d_in] + [width] * self.TRUNK_LAYERS
        layers = []
        for i in range(self.TRUNK_LAYERS):
            in_d = dims[i] + (d_in if i == self.SKIP_AT else 0)
            layers.append(nn.Linear(in_d, dims[i + 1]))
        self.trunk = nn.ModuleList(layers)
        self.sigma_out = nn.Linear(width, 1 + width)
        self.color_hidden = nn.Linear(width + color_dim + local_dim, width)
        self.color_out = nn.Linear(width, 3)

    def forward(self, enc, geom_embed, color_embed, local_embed):
        n = enc.shape[0]
        h = torch.cat([enc, geom_embed.expand(n, -1)], dim=-1)
        inp = h
        for i, layer in enumerate(self.trunk):
            if i == self.SKIP_AT:
                h = torch.cat([h, inp], dim=-1)
            h = torch.relu(layer(h))
        raw = self.sigma_out(h)
        sigma = nn.functional.softplus(raw[:, 0])
        feat = raw[:, 1:]
        ch = torch.cat([feat, color_embed.expand(n, -1), local_embed], dim=-1)
        color = torch.sigmoid(self.color_out(torch.relu(self.color_hidden(ch))))
        return color, sigma


def field_eval(mlp_o: FieldMLP, enc: torch.Tensor, geom_embed: torch.Tensor,
               color_embed: torch.Tensor, local_embed: torch.Tensor) -> FieldSample:
    """Evaluate the canonical field at encoded positions."""
    if enc.ndim == 1:
        color, sigma = mlp_o(enc[None], geom_embed, color_embed, local_embed[None])
        return FieldSample(color=color[0], sigma=sigma[0])
    color, sigma = mlp_o(enc, geom_embed, color_embed, local_embed)
    return FieldSample(color=color, sigma=sigma)


class RenderContext:
    """Pose- and appearance-specific state prepared once per render call.

    Bundles the corrected pose, inverse bone transforms, generated
    tri-plane and culling geometry so per-chunk point evaluation does
    no redundant work.
    """

    def __init__(self, model: "AvatarModel", pose: BodyPose, appearance_id: int,
                 planes: Optional[TriPlaneGrid], apply_pose_correction: bool = True):
        self.model = model
        self.appearance_id = appearance_id
        if apply_pose_correction and model.pose_net is not None:
            pose = model.correct_pose(pose)
        self.pose = pose
        world = sk.world_rotations(model.rig, self.pose)
        self.transforms = sk.bone_transforms(model.rig, self.pose, world=world)
        self.planes = planes
        # culling geometry is a hard gate, not part of the objective
        with torch.no_grad():
            detached = BodyPose(self.pose.joints.detach(),
                                self.pose.rotations.detach(), self.pose.frame_tag)
            self.segments = sk.posed_segments(model.rig, detached,
                                              world=world.detach())
            self.sphere = sk.bounding_sphere(model.rig, detached,
                                             segments=self.segments)

    def ray_bounds(self, origins: torch.Tensor, dirs: torch.Tensor):
        """Per-ray near/far from the posed bounding sphere; miss -> hit False."""
        center, radius = self.sphere
        oc = origins - center.to(origins.dtype)
        b = (oc * dirs).sum(-1)
        c = (oc * oc).sum(-1) - radius * radius
        disc = b * b - c
        hit = disc > 0
        root = disc.clamp_min(0).sqrt()
        near = (-b - root).clamp_min(1e-3)
        far = -b + root
        hit = hit & (far > near)
        return near, far, hit

    def eval_points(self, pts: torch.Tensor) -> FieldSample:
        return self.model.eval_observed_points(
            pts, self.transforms, self.appearance_id, self.planes, segments=self.segments
        )


class AvatarModel(nn.Module):
    """Deformable radiance field over an articulated skeleton."""

    def __init__(self, rig: SkeletonRig, store: AppearanceStore, mlp_o: FieldMLP,
                 pose_net: Optional[PoseCorrectionNet], l_freq: int = 10,
                 use_local_embeddings: bool = True, cull_dilation: float = 1.4):
        super().__init__()
        self.rig = rig
        self.weight_field = rig.weight_field  # registers the grid as a parameter
        self.store = store
        self.mlp_o = mlp_o
        self.pose_net = pose_net
        self.l_freq = l_freq
        self.use_local_embeddings = use_local_embeddings
        self.cull_dilation = cull_dilation

    def correct_pose(self, pose: BodyPose) -> BodyPose:
        if self.pose_net is None:
            return pose
        return sk.pose_correct(self.pose_net, pose)

    def prepare(self, pose: BodyPose, appearance_id: int,
                apply_pose_correction: bool = True) -> RenderContext:
        planes = self.store.triplane(appearance_id) if self.use_local_embeddings else None
        if not self.use_local_embeddings:
            self.store.condition(appearance_id)  # still validates registration
        return RenderContext(self, pose, appearance_id, planes, apply_pose_correction)

    def local_embeddings(self, canonical_pts: torch.Tensor, planes: Optional[TriPlaneGrid]) -> torch.Tensor:
        if not self.use_local_embeddings or planes is None:
            c = self.store.generator.feature_dim
            return torch.zeros(canonical_pts.shape[0], c, dtype=canonical_pts.dtype)
        return query_triplane(planes, canonical_pts)

    def eval_canonical_points(self, pts: torch.Tensor, appearance_id: int,
                              planes: Optional[TriPlaneGrid] = None) -> FieldSample:
        if planes is None and self.use_local_embeddings:
            planes = self.store.triplane(appearance_id)
        enc = positional_encode(pts, self.l_freq)
        lt = self.local_embeddings(pts, planes)
        return field_eval(self.mlp_o, enc, self.store.geometry_embed,
                          self.store.color_embed, lt)

    def eval_observed_points(self, pts: torch.Tensor, transforms, appearance_id: int,
                             planes: Optional[TriPlaneGrid], segments=None) -> FieldSample:
        """Warp observed points to canonical space and evaluate the field.

        Points outside the body (culling capsules or zero weight
        support) come back as empty space: sigma 0, color 0.
        """
        n = pts.shape[0]
        keep = torch.ones(n, dtype=torch.bool)
        if segments is not None:
            a, b = segments
            d = sk._point_segment_distance(pts, a.to(pts.dtype), b.to(pts.dtype))
            keep = (d <= self.rig.bone_radii.to(pts.dtype) * self.cull_dilation).any(dim=-1)
        color = torch.zeros(n, 3, dtype=pts.dtype)
        sigma = torch.zeros(n, dtype=pts.dtype)
        if not bool(keep.any()):
            return FieldSample(color=color, sigma=sigma)
        idx = keep.nonzero(as_tuple=True)[0]
        sub = pts[idx]
        canonical, valid = sk.skeletal_transforms(self.rig, transforms, sub)
        if not bool(valid.all()):
            vidx = valid.nonzero(as_tuple=True)[0]
            idx = idx[vidx]
            canonical = canonical[vidx]
            if idx.numel() == 0:
                return FieldSample(color=color, sigma=sigma)
        out = self.eval_canonical_points(canonical, appearance_id, planes)
        color = color.index_copy(0, idx, out.color)
        sigma = sigma.index_copy(0, idx, out.sigma)
        return FieldSample(color=color, sigma=sigma)

    def observed_field(self, x, pose: BodyPose, appearance_id: int) -> FieldSample:
        """Single- or multi-point observed-space field evaluation."""
        pts = torch.as_tensor(x, dtype=torch.float32)
        single = pts.ndim == 1
        ctx = self.prepare(pose, appearance_id)
        out = ctx.eval_points(pts.reshape(-1, 3))
        if single:
            return FieldSample(color=out.color[0], sigma=out.sigma[0])
        return out


def observed_field(model: AvatarModel, x, pose: BodyPose, appearance_id: int) -> FieldSample:
    return model.observed_field(x, pose, appearance_id)


def build_model(rig: SkeletonRig, width: int = 32, l_freq: int = 10,
                triplane_res: int = 64, triplane_feat: int = 8,
                generator_channels: int = 8, pose_hidden: int = 64,
                max_frames: int = 256, seed: int = 42,
                use_local_embeddings: bool = True,
                use_pose_correction: bool = True,
                cull_dilation: float = 1.4) -> AvatarModel:
    """Construct a full avatar model with seeded parameter init."""
    torch.manual_seed(seed)
    store = AppearanceStore(rig.bounds, resolution=triplane_res,
                            feature_dim=triplane_feat,
                            base_channels=generator_channels, seed=seed)
    mlp_o = FieldMLP(encoding_dim(l_freq), geom_dim=store.GEOM_DIM,
                     color_dim=store.COLOR_DIM, local_dim=triplane_feat, width=width)
    pose_net = PoseCorrectionNet(rig.bone_count, hidden=pose_hidden,
                                 max_frames=max_frames) if use_pose_correction else None
    return AvatarModel(rig, store, mlp_o, pose_net, l_freq=l_freq,
                       use_local_embeddings=use_local_embeddings,
                       cull_dilation=cull_dilation)
