"""Perceptual patch metrics: the gradient-similarity default, the null
stand-in, and the external-module adapter."""

import pytest
import torch

from avatarcl.perceptual import (
    GradientSSIMDistance,
    LPIPSAdapter,
    NullPerceptual,
    get_perceptual,
)


def _patches(seed=0, n=2, side=8):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, side, side, 3, generator=g)


def test_identical_patches_score_zero():
    a = _patches()
    d = GradientSSIMDistance()(a, a.clone())
    assert float(d) == pytest.approx(0.0, abs=1e-12)


def test_distance_is_positive_and_differentiable():
    a = _patches(1)
    b = _patches(2)
    a.requires_grad_(True)
    d = GradientSSIMDistance()(a, b)
    assert float(d.detach()) > 0.0
    d.backward()
    assert a.grad is not None
    assert torch.isfinite(a.grad).all()
    assert float(a.grad.abs().sum()) > 0.0


def test_uniform_offset_is_invisible_but_edges_are_not():
    # keep values in [0.1, 0.8] so the +0.1 shift never saturates:
    # forward differences are then bit-identical and the score is 0
    a = _patches(3) * 0.7 + 0.1
    offset = a + 0.1
    edited = a.clone()
    edited[:, 4:, :, :] = 0.9 - edited[:, 4:, :, :]  # strong new edge
    metric = GradientSSIMDistance()
    d_offset = float(metric(a, offset))
    d_edge = float(metric(a, edited))
    assert d_offset < 1e-6
    assert d_edge > 0.01


def test_patches_below_minimum_size_fall_back_to_zero():
    a = torch.rand(1, 2, 2, 3)
    d = GradientSSIMDistance()(a, a * 0.5)
    assert float(d) == 0.0 and d.dtype == a.dtype


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        GradientSSIMDistance()(torch.rand(1, 8, 8, 3), torch.rand(1, 6, 6, 3))


def test_null_perceptual_is_inert():
    m = NullPerceptual()
    assert m.name == "none"
    assert float(m(_patches(), _patches(9))) == 0.0


class _StubLPIPS:
    def __init__(self):
        self.seen = None

    def __call__(self, a, b):
        self.seen = (tuple(a.shape), tuple(b.shape))
        return (a - b).abs().mean(dim=(1, 2, 3))


def test_lpips_adapter_permutes_to_channels_first():
    stub = _StubLPIPS()
    adapter = LPIPSAdapter(stub)
    a = _patches(4, n=3, side=8)
    b = _patches(5, n=3, side=8)
    out = adapter(a, b)
    assert stub.seen == ((3, 3, 8, 8), (3, 3, 8, 8))
    assert out.shape == ()


def test_lpips_adapter_requires_a_module():
    with pytest.raises(ValueError):
        LPIPSAdapter(None)
    with pytest.raises(ValueError):
        get_perceptual("lpips")


def test_registry_lookup():
    assert isinstance(get_perceptual("gradssim"), GradientSSIMDistance)
    assert isinstance(get_perceptual("none"), NullPerceptual)
    with pytest.raises(KeyError):
        get_perceptual("vgg")
