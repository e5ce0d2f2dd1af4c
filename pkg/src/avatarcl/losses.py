"""Training losses and the replay-weight schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class TrainSchedule:
    """Iteration structure and loss weights for one task.

    Phase 1 runs for t < t_max - t_0 with all parameters trainable and
    no pose-distillation term; phase 2 covers the final t_0 iterations
    with everything frozen except the pose-correction MLP and the
    global color embedding, and lambda_beta switched on.
    """

    t_max: int
    t_0: int
    t_init: int = 0
    lambda_1: float = 0.2
    lambda_2: float = 0.2
    lambda_beta: float = 800.0
    lr_main: float = 5e-4    # field MLP, global color + geometry embeddings
    lr_rest: float = 5e-5    # everything else
    seed: int = 42

    def __post_init__(self):
        if not (self.t_init < self.t_max - self.t_0 < self.t_max):
            raise ValueError("schedule requires t_init < t_max - t_0 < t_max")
        if min(self.lambda_1, self.lambda_2, self.lambda_beta) < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def phase2_start(self) -> int:
        return self.t_max - self.t_0


def lambda_p(t: float, t_init: int, t_max: int, t_0: int) -> float:
    """Replay-loss weight: half-sine ramp 0 -> 2 on [t_init, t_max - t_0), 1 after.

    Implemented exactly as printed, including the jump at the phase
    boundary where the ramp has reached 2 and the value snaps to 1.
    """
    if not (t_init < t_max - t_0 < t_max):
        raise ValueError("schedule requires t_init < t_max - t_0 < t_max")
    if t >= t_max - t_0:
        return 1.0
    return math.sin(-math.pi / 2 + math.pi * (t - t_init) / (t_max - t_0 - t_init)) + 1.0


def _check_pair(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def loss_current(pred: torch.Tensor, target: torch.Tensor, lambda_2: float = 0.2,
                 perceptual=None) -> torch.Tensor:
    """Sum of squared color errors over all rays plus the perceptual term.

    pred/target are (..., 3) ray colors; patch-shaped inputs
    (P, s, s, 3) are fine and are what the perceptual metric expects.
    """
    _check_pair(pred, target)
    out = ((pred - target) ** 2).sum()
    if perceptual is not None and lambda_2 != 0:
        out = out + lambda_2 * perceptual(pred, target)
    return out


def loss_replay(pred: torch.Tensor, teacher: torch.Tensor, lambda_2: float = 0.2,
                perceptual=None) -> torch.Tensor:
    """Replay loss against teacher colors; same structure as loss_current."""
    return loss_current(pred, teacher, lambda_2=lambda_2, perceptual=perceptual)


def loss_pose(student_residual: torch.Tensor, teacher_residual: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between flattened residual rotations."""
    _check_pair(student_residual, teacher_residual)
    return ((student_residual - teacher_residual) ** 2).sum()
