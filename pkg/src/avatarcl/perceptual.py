"""Pluggable perceptual patch metrics.

The default is a lightweight multi-scale gradient-magnitude distance
with an SSIM-style stabilized ratio, so the package needs no pretrained
network.  An adapter class accepts an external LPIPS-like module for
callers that have one; nothing here downloads weights.
"""

from __future__ import annotations

import torch


class GradientSSIMDistance:
    """Multi-scale gradient-magnitude similarity distance on patches.

    Zero for identical patches, differentiable, and sensitive to edge
    structure rather than absolute intensity.  Inputs are (..., H, W, 3)
    tensors in [0, 1]; output is a scalar tensor.
    """

    name = "gradssim"

    def __init__(self, scales: int = 2, c: float = 1e-4):
        self.scales = scales
        self.c = c

    @staticmethod
    def _grad_magnitude(img: torch.Tensor) -> torch.Tensor:
        # img (B, 3, H, W); forward differences, zero-padded at the far edge
        gx = img[..., :, 1:] - img[..., :, :-1]
        gy = img[..., 1:, :] - img[..., :-1, :]
        gx = torch.nn.functional.pad(gx, (0, 1))
        gy = torch.nn.functional.pad(gy, (0, 0, 0, 1))
        return torch.sqrt(gx * gx + gy * gy + 1e-12)

    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if pred.shape != target.shape:
            raise ValueError("patch shapes must match")
        a = pred.reshape(-1, *pred.shape[-3:]).permute(0, 3, 1, 2)
        b = target.reshape(-1, *target.shape[-3:]).permute(0, 3, 1, 2)
        total = 0.0
        n_used = 0
        for s in range(self.scales):
            if min(a.shape[-2:]) < 4:
                break
            ma = self._grad_magnitude(a)
            mb = self._grad_magnitude(b)
            sim = (2 * ma * mb + self.c) / (ma * ma + mb * mb + self.c)
            total = total + (1.0 - sim).mean()
            n_used += 1
            if s + 1 < self.scales:
                a = torch.nn.functional.avg_pool2d(a, 2)
                b = torch.nn.functional.avg_pool2d(b, 2)
        if n_used == 0:
            return torch.zeros((), dtype=pred.dtype)
        return total / n_used


class NullPerceptual:
    """Disables the perceptual term while keeping the interface."""

    name = "none"

    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return torch.zeros((), dtype=pred.dtype)


class LPIPSAdapter:
    """Wraps an externally supplied LPIPS-style module.

    The package never bundles pretrained weights; construct this with
    your own metric module whose forward takes two (B, 3, H, W) tensors
    in [0, 1] and returns per-item distances.
    """

    name = "lpips"

    def __init__(self, module):
        if module is None:
            raise ValueError(
                "LPIPSAdapter needs an externally constructed metric module; "
                "use the default 'gradssim' metric for a self-contained run"
            )
        self.module = module

    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        a = pred.reshape(-1, *pred.shape[-3:]).permute(0, 3, 1, 2)
        b = target.reshape(-1, *target.shape[-3:]).permute(0, 3, 1, 2)
        return self.module(a, b).mean()


_BUILTIN = {
    "gradssim": GradientSSIMDistance,
    "none": NullPerceptual,
}


def get_perceptual(name: str, **kwargs):
    """Construct a perceptual metric by registry name ('gradssim', 'none')."""
    if name == "lpips":
        return LPIPSAdapter(kwargs.get("module"))
    if name not in _BUILTIN:
        raise KeyError(f"unknown perceptual metric {name!r}")
    return _BUILTIN[name](**kwargs)
