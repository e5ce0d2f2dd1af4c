"""Ray generation, sampling, and emission-absorption compositing.

The renderer is quadrature over a field evaluator: anything exposing
``eval_points(pts) -> FieldSample`` can be rendered, and the avatar
model's prepared RenderContext additionally supplies per-ray near/far
bounds from the posed bounding sphere.  Training uses jittered
stratified samples (segment lengths are consecutive differences plus a
final gap to far); evaluation uses deterministic midpoint samples with
bin-width segments, which makes constant-density transmittance exact up
to float error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch


@dataclass
class CameraParams:
    """Pinhole camera: intrinsics in pixels, world-from-camera extrinsics.

    A camera-space point x_cam maps to world as R @ x_cam + t; the
    camera center is t.  Camera axes: x right, y down, z forward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: torch.Tensor    # (3, 3) world-from-camera
    translation: torch.Tensor  # (3,)
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.float32).reshape(3, 3)
        self.translation = torch.as_tensor(self.translation, dtype=torch.float32).reshape(3)
        r = self.rotation
        if (r.T @ r - torch.eye(3)).abs().max() > 1e-5:
            raise ValueError("rotation must be orthonormal")

    @property
    def forward_axis(self) -> torch.Tensor:
        return self.rotation[:, 2]

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "CameraParams":
        return CameraParams(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            rotation=torch.tensor(d["rotation"], dtype=torch.float32),
            translation=torch.tensor(d["translation"], dtype=torch.float32),
            width=int(d["width"]), height=int(d["height"]),
        )


def look_at_camera(eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 40.0,
                   width: int = 64, height: int = 64) -> CameraParams:
    """Camera at `eye` looking toward `target` (y-down image convention)."""
    eye = torch.as_tensor(eye, dtype=torch.float32)
    target = torch.as_tensor(target, dtype=torch.float32)
    up = torch.as_tensor(up, dtype=torch.float32)
    fwd = target - eye
    fwd = fwd / fwd.norm()
    right = torch.linalg.cross(fwd, up)
    right = right / right.norm()
    down = torch.linalg.cross(fwd, right)
    rot = torch.stack([right, down, fwd], dim=1)
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return CameraParams(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                        rotation=rot, translation=eye, width=width, height=height)


@dataclass
class Rays:
    """A batch of rays with unit directions and per-ray [near, far]."""

    origins: torch.Tensor     # (N, 3)
    directions: torch.Tensor  # (N, 3) unit norm
    near: torch.Tensor        # (N,)
    far: torch.Tensor         # (N,)

    def __post_init__(self):
        norms = self.directions.norm(dim=-1)
        if (norms - 1.0).abs().max() > 1e-6:
            raise ValueError("ray directions must be unit norm")
        if not bool((self.near < self.far).all()):
            raise ValueError("rays require near < far")

    def __len__(self) -> int:
        return self.origins.shape[0]


def generate_rays(camera: CameraParams, pixels=None, near: float = 0.05,
                  far: float = 20.0) -> Rays:
    """Rays through the given pixel coordinates (defaults to all centers).

    `pixels` is (N, 2) float (x, y) image coordinates; integer pixel
    (i, j) has its center at (i + 0.5, j + 0.5), which is what the
    full-image default uses.
    """
    if pixels is None:
        ys, xs = torch.meshgrid(
            torch.arange(camera.height, dtype=torch.float32) + 0.5,
            torch.arange(camera.width, dtype=torch.float32) + 0.5,
            indexing="ij",
        )
        pixels = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
    else:
        pixels = torch.as_tensor(pixels, dtype=torch.float32).reshape(-1, 2)
        oob = (pixels[:, 0] < 0) | (pixels[:, 0] > camera.width) | \
              (pixels[:, 1] < 0) | (pixels[:, 1] > camera.height)
        if bool(oob.any()):
            raise ValueError("pixel coordinates outside image bounds")
    d_cam = torch.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.fx,
            (pixels[:, 1] - camera.cy) / camera.fy,
            torch.ones(pixels.shape[0]),
        ],
        dim=-1,
    )
    d_world = d_cam @ camera.rotation.T
    d_world = d_world / d_world.norm(dim=-1, keepdim=True)
    n = pixels.shape[0]
    return Rays(
        origins=camera.translation.expand(n, 3).clone(),
        directions=d_world,
        near=torch.full((n,), float(near)),
        far=torch.full((n,), float(far)),
    )


def project_point(camera: CameraParams, point: torch.Tensor) -> torch.Tensor:
    """World point(s) -> (x, y) pixel coordinates; (3,) or (N, 3)."""
    p_cam = (point - camera.translation) @ camera.rotation
    return torch.stack(
        [camera.fx * p_cam[..., 0] / p_cam[..., 2] + camera.cx,
         camera.fy * p_cam[..., 1] / p_cam[..., 2] + camera.cy],
        dim=-1,
    )


def sample_along_rays(rays: Rays, n_samples: int, mode: str = "eval",
                      rng: Optional[torch.Generator] = None):
    """Stratified sample positions and segment lengths per ray.

    Returns (points (N, S, 3), t (N, S), delta (N, S)).  mode "train"
    jitters one sample uniformly inside each of S equal bins; mode
    "eval" takes bin midpoints and uses the exact bin width as delta.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = len(rays)
    span = (rays.far - rays.near)[:, None]
    h = span / n_samples
    base = torch.arange(n_samples, dtype=torch.float32)[None, :]
    if mode == "train":
        u = torch.rand(n, n_samples, generator=rng)
        t = rays.near[:, None] + (base + u) * h
        delta = torch.cat([t[:, 1:] - t[:, :-1], rays.far[:, None] - t[:, -1:]], dim=-1)
    elif mode == "eval":
        t = rays.near[:, None] + (base + 0.5) * h
        delta = h.expand(n, n_samples)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return pts, t, delta


def composite(sigma: torch.Tensor, color: torch.Tensor, delta: torch.Tensor,
              background: float = 1.0):
    """Emission-absorption compositing with a solid background.

    sigma (N, S), color (N, S, 3), delta (N, S) -> (rgb (N, 3),
    alpha (N,), weights (N, S)).  weights[i] = T_i (1 - exp(-sigma_i
    delta_i)) and alpha = sum(weights); weights plus the final
    transmittance sum to one by construction.
    """
    tau = sigma * delta
    alpha_i = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(tau, dim=-1))
    # T_i = exp(-sum_{j<i} tau_j): shift right, T_0 = 1
    t_i = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=-1)
    weights = t_i * alpha_i
    alpha = weights.sum(dim=-1)
    rgb = (weights[..., None] * color).sum(dim=-2) + (1.0 - alpha)[:, None] * background
    return rgb, alpha, weights


def render_rays(evaluator, rays: Rays, n_samples: int = 128, mode: str = "eval",
                background: float = 1.0, rng: Optional[torch.Generator] = None,
                chunk: int = 65536):
    """Render a ray batch against a field evaluator.

    If the evaluator provides ray_bounds(origins, directions), those
    per-ray bounds replace the rays' own near/far and missing rays
    composite straight to the background.
    """
    n = len(rays)
    near, far = rays.near, rays.far
    hit = torch.ones(n, dtype=torch.bool)
    if hasattr(evaluator, "ray_bounds"):
        near, far, hit = evaluator.ray_bounds(rays.origins, rays.directions)
    rgb = torch.full((n, 3), float(background))
    alpha = torch.zeros(n)
    if bool(hit.any()):
        idx = hit.nonzero(as_tuple=True)[0]
        sub = Rays(rays.origins[idx], rays.directions[idx], near[idx], far[idx])
        pts, _, delta = sample_along_rays(sub, n_samples, mode=mode, rng=rng)
        m = len(sub)
        sig_parts, col_parts = [], []
        flat = pts.reshape(-1, 3)
        step = max(chunk, n_samples)
        for s in range(0, flat.shape[0], step):
            out = evaluator.eval_points(flat[s:s + step])
            sig_parts.append(out.sigma)
            col_parts.append(out.color)
        sigma = torch.cat(sig_parts).reshape(m, n_samples)
        color = torch.cat(col_parts).reshape(m, n_samples, 3)
        sub_rgb, sub_alpha, _ = composite(sigma, color, delta, background=background)
        rgb = rgb.index_copy(0, idx, sub_rgb)
        alpha = alpha.index_copy(0, idx, sub_alpha)
    return rgb, alpha


def render_ray(field, ray: Rays, pose=None, appearance_id=None, n_samples: int = 128,
               mode: str = "eval", background: float = 1.0,
               rng: Optional[torch.Generator] = None):
    """Render a single ray (a length-1 Rays batch) and return (rgb, alpha)."""
    evaluator = field
    if pose is not None and hasattr(field, "prepare"):
        evaluator = field.prepare(pose, appearance_id)
    rgb, alpha = render_rays(evaluator, ray, n_samples=n_samples, mode=mode,
                             background=background, rng=rng)
    return rgb[0], float(alpha[0])


def render_image(field, camera: CameraParams, pose=None, appearance_id=None,
                 n_samples: int = 128, mode: str = "eval", background: float = 1.0,
                 rng: Optional[torch.Generator] = None) -> np.ndarray:
    """Render a full image to a float numpy array in [0, 1], shape (H, W, 3)."""
    evaluator = field
    if pose is not None and hasattr(field, "prepare"):
        evaluator = field.prepare(pose, appearance_id)
    rays = generate_rays(camera)
    with torch.no_grad() if mode == "eval" else torch.enable_grad():
        rgb, _ = render_rays(evaluator, rays, n_samples=n_samples, mode=mode,
                             background=background, rng=rng)
    img = rgb.reshape(camera.height, camera.width, 3)
    return img.detach().clamp(0.0, 1.0).numpy()


# ---------------------------------------------------------------------------
# patch batching


@dataclass
class PatchSpec:
    """Geometry of one sampling convention: `count` square patches of `side` px."""

    count: int
    side: int
    role: str = "current"


# full-scale conventions; the desk preset shrinks these through config
CURRENT_PATCH_SPEC = PatchSpec(count=6, side=32, role="current")
PAST_PATCH_SPEC = PatchSpec(count=1, side=64, role="past")


@dataclass
class Patch:
    rect: tuple                     # (x0, y0, side)
    predicted: torch.Tensor         # (side, side, 3), differentiable
    target: Optional[torch.Tensor] = None


@dataclass
class PatchBatch:
    spec: PatchSpec
    patches: list = field(default_factory=list)

    @property
    def predicted(self) -> torch.Tensor:
        return torch.stack([p.predicted for p in self.patches])

    @property
    def targets(self) -> torch.Tensor:
        return torch.stack([p.target for p in self.patches])


def subject_bbox(camera: CameraParams, segments, radii: torch.Tensor,
                 dilate: float = 0.10):
    """2D pixel bbox of the posed capsules, dilated and clamped to the image."""
    a, b = segments
    pts = torch.cat([a, b], dim=0)
    uv = project_point(camera, pts)
    pad = float(radii.max()) * camera.fx / max(
        float((pts - camera.translation).norm(dim=-1).min()), 1e-3
    )
    x0, y0 = uv.min(dim=0).values - pad
    x1, y1 = uv.max(dim=0).values + pad
    w, h = x1 - x0, y1 - y0
    x0, y0 = x0 - dilate * w, y0 - dilate * h
    x1, y1 = x1 + dilate * w, y1 + dilate * h
    return (
        max(0.0, float(x0)), max(0.0, float(y0)),
        min(float(camera.width), float(x1)), min(float(camera.height), float(y1)),
    )


def place_patches(bbox, spec: PatchSpec, camera: CameraParams, rng: np.random.Generator):
    """Uniform top-left placements inside bbox, clamped so patches fit the image."""
    x0, y0, x1, y1 = bbox
    s = spec.side
    lo_x, hi_x = x0, max(x0, x1 - s)
    lo_y, hi_y = y0, max(y0, y1 - s)
    hi_x = min(hi_x, camera.width - s)
    hi_y = min(hi_y, camera.height - s)
    lo_x = min(max(0.0, lo_x), hi_x)
    lo_y = min(max(0.0, lo_y), hi_y)
    rects = []
    for _ in range(spec.count):
        px = int(rng.uniform(lo_x, hi_x)) if hi_x > lo_x else int(lo_x)
        py = int(rng.uniform(lo_y, hi_y)) if hi_y > lo_y else int(lo_y)
        rects.append((px, py, s))
    return rects


def render_patch_batch(field, camera: CameraParams, pose, appearance_id,
                       spec: PatchSpec, rng: np.random.Generator,
                       n_samples: int = 128, mode: str = "train",
                       target_image: Optional[np.ndarray] = None,
                       background: float = 1.0,
                       sample_rng: Optional[torch.Generator] = None,
                       evaluator=None) -> PatchBatch:
    """Sample patches over the subject and render them differentiably.

    Placement is uniform over the projected body bounding box (10%
    dilation) using the supplied numpy rng, so identical seeds give
    identical placements.  Targets are cropped from target_image when
    given.
    """
    if camera.width < spec.side or camera.height < spec.side:
        raise ValueError("image smaller than requested patch")
    if evaluator is None:
        evaluator = field.prepare(pose, appearance_id) if hasattr(field, "prepare") else field
    segments = getattr(evaluator, "segments", None)
    if segments is not None:
        bbox = subject_bbox(camera, segments, field.rig.bone_radii)
    else:
        bbox = (0.0, 0.0, float(camera.width), float(camera.height))
    rects = place_patches(bbox, spec, camera, rng)
    batch = PatchBatch(spec=spec)
    side = spec.side
    for (px, py, s) in rects:
        ys, xs = torch.meshgrid(
            torch.arange(py, py + s, dtype=torch.float32) + 0.5,
            torch.arange(px, px + s, dtype=torch.float32) + 0.5,
            indexing="ij",
        )
        pixels = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
        rays = generate_rays(camera, pixels)
        rgb, _ = render_rays(evaluator, rays, n_samples=n_samples, mode=mode,
                             background=background, rng=sample_rng)
        pred = rgb.reshape(side, side, 3)
        target = None
        if target_image is not None:
            crop = target_image[py:py + s, px:px + s]
            target = torch.as_tensor(np.ascontiguousarray(crop), dtype=torch.float32)
        batch.patches.append(Patch(rect=(px, py, s), predicted=pred, target=target))
    return batch
