"""Global-local appearance storage.

Two shared global embeddings (geometry and color) are trained jointly
with one small condition embedding per appearance.  A convolutional
generator turns a condition embedding into three axis-aligned feature
planes; querying a canonical point bilinearly on each plane and summing
gives that appearance's local feature for the color head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class TriPlaneGrid:
    """Three axis-aligned feature planes over a canonical bounding box.

    planes has shape (3, C, R, R) ordered (xy, xz, yz); plane axes are
    stored so the second spatial index runs along the first named
    coordinate (x for xy and xz, y for yz).
    """

    planes: torch.Tensor
    bounds: torch.Tensor  # (2, 3) canonical lo/hi

    def __post_init__(self):
        # shape-only validation: grids are rebuilt every forward pass,
        # so an elementwise finiteness scan here would tax the hot path
        if self.planes.ndim != 4 or self.planes.shape[0] != 3 or self.planes.shape[2] != self.planes.shape[3]:
            raise ValueError("planes must be (3, C, R, R)")

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]

    @property
    def feature_dim(self) -> int:
        return self.planes.shape[1]


# which box axes feed each plane's (u, v) query: xy, xz, yz
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def query_triplane(grid: TriPlaneGrid, pts: torch.Tensor) -> torch.Tensor:
    """Sum of bilinear plane lookups for canonical points: (N, 3) -> (N, C).

    Out-of-box coordinates clamp to the box surface, so grazing rays
    stay defined.
    """
    lo = grid.bounds[0].to(pts.dtype)
    hi = grid.bounds[1].to(pts.dtype)
    u = (2.0 * (pts - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    # grid_sample convention: coord 0 indexes W (last dim), coord 1 indexes H
    coords = torch.stack([u[:, _PLANE_AXES[i][0]] for i in range(3)]), torch.stack(
        [u[:, _PLANE_AXES[i][1]] for i in range(3)]
    )
    g = torch.stack(coords, dim=-1).reshape(3, -1, 1, 2)
    planes = grid.planes
    if planes.dtype != pts.dtype:
        planes = planes.to(pts.dtype)
    out = nn.functional.grid_sample(
        planes, g, mode="bilinear", padding_mode="border", align_corners=True
    )
    return out.reshape(3, grid.feature_dim, -1).sum(dim=0).T


class TriPlaneGenerator(nn.Module):
    """Condition embedding -> tri-plane, via a dense seed and two 2x upsamples."""

    def __init__(self, embed_dim: int = 16, resolution: int = 64, feature_dim: int = 8, base_channels: int = 16):
        super().__init__()
        if resolution % 4 != 0:
            raise ValueError("resolution must be divisible by 4")
        self.resolution = resolution
        self.feature_dim = feature_dim
        self.base_channels = base_channels
        self.seed_res = resolution // 4
        self.fc = nn.Linear(embed_dim, 3 * base_channels * self.seed_res * self.seed_res)
        self.conv1 = nn.Conv2d(base_channels, base_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(base_channels, feature_dim, 3, padding=1)

    def forward(self, embed: torch.Tensor) -> torch.Tensor:
        h = self.fc(embed).reshape(3, self.base_channels, self.seed_res, self.seed_res)
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.relu(self.conv1(h))
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv2(h)


def generate_triplane(generator: TriPlaneGenerator, embed: torch.Tensor, bounds: torch.Tensor) -> TriPlaneGrid:
    """Deterministic, differentiable plane synthesis for one appearance."""
    if embed.shape[-1] != generator.fc.in_features:
        raise ValueError("condition embedding length does not match generator input width")
    return TriPlaneGrid(planes=generator(embed), bounds=bounds)


class DuplicateAppearanceError(ValueError):
    pass


class UnknownAppearanceError(KeyError):
    pass


@dataclass
class ConditionEmbedding:
    appearance_id: int
    values: torch.Tensor  # view of the registered trainable parameter


class AppearanceStore(nn.Module):
    """Registry of per-appearance condition embeddings plus the shared state.

    Holds the global geometry embedding (length 16), global color
    embedding (length 48), the tri-plane generator, and one trainable
    condition embedding (length 16) per registered appearance.
    """

    GEOM_DIM = 16
    COLOR_DIM = 48
    COND_DIM = 16

    def __init__(self, bounds, resolution: int = 64, feature_dim: int = 8,
                 base_channels: int = 16, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self._rng = gen
        self.geometry_embed = nn.Parameter(torch.randn(self.GEOM_DIM, generator=gen) * 0.01)
        self.color_embed = nn.Parameter(torch.randn(self.COLOR_DIM, generator=gen) * 0.01)
        self.condition_embeds = nn.ParameterDict()
        self.generator = TriPlaneGenerator(self.COND_DIM, resolution, feature_dim, base_channels)
        self.register_buffer("bounds", torch.as_tensor(bounds, dtype=torch.float32).reshape(2, 3))

    def register_appearance(self, appearance_id: int) -> ConditionEmbedding:
        key = str(int(appearance_id))
        if key in self.condition_embeds:
            raise DuplicateAppearanceError(f"appearance {appearance_id} already registered")
        values = torch.randn(self.COND_DIM, generator=self._rng) * 0.01
        self.condition_embeds[key] = nn.Parameter(values)
        return ConditionEmbedding(int(appearance_id), self.condition_embeds[key])

    def condition(self, appearance_id: int) -> torch.Tensor:
        key = str(int(appearance_id))
        if key not in self.condition_embeds:
            raise UnknownAppearanceError(f"appearance {appearance_id} is not registered")
        return self.condition_embeds[key]

    @property
    def appearance_ids(self):
        return sorted(int(k) for k in self.condition_embeds.keys())

    def __len__(self) -> int:
        return len(self.condition_embeds)

    def triplane(self, appearance_id: int) -> TriPlaneGrid:
        return generate_triplane(self.generator, self.condition(appearance_id), self.bounds)


def register_appearance(store: AppearanceStore, appearance_id: int) -> ConditionEmbedding:
    return store.register_appearance(appearance_id)
