import numpy as np
import pytest
import torch

from avatarcl.appearance import (
    AppearanceStore,
    DuplicateAppearanceError,
    TriPlaneGenerator,
    TriPlaneGrid,
    UnknownAppearanceError,
    generate_triplane,
    query_triplane,
    register_appearance,
)

BOUNDS = torch.tensor([[-1.0, -0.5, -2.0], [1.5, 2.0, 1.0]])


def random_grid(res=16, feat=4, seed=0, scale=0.5):
    gen = torch.Generator().manual_seed(seed)
    planes = torch.randn(3, feat, res, res, generator=gen) * scale
    return TriPlaneGrid(planes=planes, bounds=BOUNDS)


def node_point(grid, ix, iy, iz):
    """Canonical point sitting exactly on grid ticks in all three axes."""
    lo, hi = grid.bounds[0], grid.bounds[1]
    frac = torch.tensor([ix, iy, iz], dtype=torch.float64) / (grid.resolution - 1)
    return lo.double() + frac * (hi - lo).double()


def bilinear_oracle(planes: np.ndarray, bounds: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Brute-force bilinear lookup, summed over the three planes.

    Mirrors the production conventions from first principles: planes are
    (3, C, R, R) with the last index running along each plane's first
    named axis; out-of-box points clamp to the box surface.
    """
    lo, hi = bounds
    u = np.clip(2.0 * (pts - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    res = planes.shape[-1]
    out = np.zeros((pts.shape[0], planes.shape[1]))
    for i, (a0, a1) in enumerate(((0, 1), (0, 2), (1, 2))):
        px = (u[:, a0] + 1.0) / 2.0 * (res - 1)
        py = (u[:, a1] + 1.0) / 2.0 * (res - 1)
        x0 = np.clip(np.floor(px).astype(int), 0, res - 2)
        y0 = np.clip(np.floor(py).astype(int), 0, res - 2)
        wx, wy = px - x0, py - y0
        p = planes[i]
        val = (
            p[:, y0, x0] * (1 - wx) * (1 - wy)
            + p[:, y0, x0 + 1] * wx * (1 - wy)
            + p[:, y0 + 1, x0] * (1 - wx) * wy
            + p[:, y0 + 1, x0 + 1] * wx * wy
        )
        out += val.T
    return out


def test_node_exact_lookup():
    grid = random_grid()
    for ix, iy, iz in [(0, 0, 0), (3, 7, 11), (15, 15, 15), (8, 0, 15)]:
        pt = node_point(grid, ix, iy, iz)
        got = query_triplane(grid, pt[None])
        expected = (
            grid.planes[0, :, iy, ix]
            + grid.planes[1, :, iz, ix]
            + grid.planes[2, :, iz, iy]
        ).double()
        assert torch.allclose(got[0], expected, atol=1e-12)


def test_cell_center_is_mean_of_four_nodes():
    # zero the xz and yz planes; a point over the center of an xy cell
    # must average that cell's four corner features
    grid = random_grid()
    grid.planes[1].zero_()
    grid.planes[2].zero_()
    ix, iy = 4, 9
    a = node_point(grid, ix, iy, 5)
    b = node_point(grid, ix + 1, iy + 1, 5)
    center = (a + b) / 2.0
    got = query_triplane(grid, center[None])[0]
    corners = grid.planes[0][:, iy : iy + 2, ix : ix + 2]
    expected = corners.reshape(grid.feature_dim, 4).mean(dim=1).double()
    assert torch.allclose(got, expected, atol=1e-9)


def test_constant_field_returns_three_v():
    feat = 5
    v = torch.tensor([0.3, -1.2, 0.0, 2.5, 7.0])
    planes = v.reshape(1, feat, 1, 1).expand(3, feat, 12, 12).contiguous()
    grid = TriPlaneGrid(planes=planes, bounds=BOUNDS)
    gen = torch.Generator().manual_seed(3)
    lo, hi = BOUNDS[0], BOUNDS[1]
    pts = lo + torch.rand(64, 3, generator=gen) * (hi - lo)
    got = query_triplane(grid, pts)
    assert torch.allclose(got, (3.0 * v).expand(64, feat), atol=1e-6)


def test_matches_bruteforce_bilinear_oracle():
    # formula equivalence is asserted on the double-precision route
    # (<= 1e-6 with orders of slack); the float32 production route gets
    # a dtype-appropriate bound since its ulp at these magnitudes is
    # already ~2e-7
    grid = random_grid(res=16, feat=4, seed=1)
    gen = torch.Generator().manual_seed(5)
    lo, hi = BOUNDS[0], BOUNDS[1]
    # include out-of-box points so the clamping policy is covered too
    pts = lo - 0.5 + torch.rand(10_000, 3, generator=gen) * (hi - lo + 1.0)
    expected = bilinear_oracle(
        grid.planes.numpy().astype(np.float64),
        BOUNDS.numpy().astype(np.float64),
        pts.double().numpy(),
    )
    got64 = query_triplane(grid, pts.double()).numpy()
    assert np.abs(got64 - expected).max() <= 1e-6
    assert np.abs(got64 - expected).max() <= 1e-10
    got32 = query_triplane(grid, pts).numpy()
    assert np.abs(got32 - expected).max() <= 1e-5


def test_query_is_continuous():
    grid = random_grid(res=16, feat=4, seed=2)
    lo, hi = BOUNDS[0], BOUNDS[1]
    lipschitz = 3.0 * grid.resolution * grid.planes.abs().max() * 2.0 / (hi - lo).min()
    gen = torch.Generator().manual_seed(9)
    a = lo + torch.rand(256, 3, generator=gen) * (hi - lo)
    b = a + (torch.rand(256, 3, generator=gen) - 0.5) * 2e-3
    qa, qb = query_triplane(grid, a), query_triplane(grid, b)
    gap = (qa - qb).abs().max(dim=1).values
    eps = (a - b).abs().max(dim=1).values
    assert (gap <= lipschitz * eps + 1e-7).all()


def test_planes_shape_validation():
    with pytest.raises(ValueError):
        TriPlaneGrid(planes=torch.zeros(2, 4, 8, 8), bounds=BOUNDS)
    with pytest.raises(ValueError):
        TriPlaneGrid(planes=torch.zeros(3, 4, 8, 6), bounds=BOUNDS)


def test_generator_is_deterministic():
    gen = TriPlaneGenerator(embed_dim=8, resolution=16, feature_dim=4, base_channels=4)
    embed = torch.randn(8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        first = generate_triplane(gen, embed, BOUNDS).planes
        second = generate_triplane(gen, embed, BOUNDS).planes
    assert torch.equal(first, second)


def test_distinct_embeddings_give_distinct_planes():
    gen = TriPlaneGenerator(embed_dim=8, resolution=16, feature_dim=4, base_channels=4)
    g = torch.Generator().manual_seed(1)
    a, b = torch.randn(8, generator=g), torch.randn(8, generator=g)
    with torch.no_grad():
        pa = generate_triplane(gen, a, BOUNDS).planes
        pb = generate_triplane(gen, b, BOUNDS).planes
    assert not torch.equal(pa, pb)


def test_generator_rejects_bad_embed_length():
    gen = TriPlaneGenerator(embed_dim=8, resolution=16, feature_dim=4, base_channels=4)
    with pytest.raises(ValueError):
        generate_triplane(gen, torch.zeros(9), BOUNDS)
    with pytest.raises(ValueError):
        TriPlaneGenerator(embed_dim=8, resolution=18, feature_dim=4)


def make_store(seed=0):
    return AppearanceStore(BOUNDS, resolution=16, feature_dim=4, base_channels=4, seed=seed)


def test_register_appearance_grows_registry():
    store = make_store()
    assert len(store) == 0
    emb = register_appearance(store, 0)
    assert len(store) == 1
    assert emb.appearance_id == 0
    assert emb.values.shape == (store.COND_DIM,)


def test_duplicate_registration_rejected():
    store = make_store()
    store.register_appearance(0)
    with pytest.raises(DuplicateAppearanceError):
        store.register_appearance(0)


def test_unknown_appearance_rejected():
    store = make_store()
    store.register_appearance(0)
    with pytest.raises(UnknownAppearanceError):
        store.condition(3)
    with pytest.raises(UnknownAppearanceError):
        store.triplane(3)


def test_embeddings_are_independent():
    store = make_store()
    for i in range(3):
        store.register_appearance(i)
    before0 = store.condition(0).detach().clone()
    before2 = store.condition(2).detach().clone()
    with torch.no_grad():
        store.condition(1).add_(1.0)
    assert torch.equal(store.condition(0).detach(), before0)
    assert torch.equal(store.condition(2).detach(), before2)


def test_gradient_isolation_between_appearances():
    # a loss built from appearance 1's planes must leave the other
    # condition embeddings without gradient
    store = make_store()
    for i in range(3):
        store.register_appearance(i)
    loss = store.triplane(1).planes.square().sum()
    loss.backward()
    assert store.condition(1).grad is not None
    assert store.condition(1).grad.abs().sum() > 0
    assert store.condition(0).grad is None
    assert store.condition(2).grad is None


def test_global_embedding_shapes():
    store = make_store()
    assert store.geometry_embed.shape == (16,)
    assert store.color_embed.shape == (48,)
    assert store.geometry_embed.requires_grad and store.color_embed.requires_grad
