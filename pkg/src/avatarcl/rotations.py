"""Quaternion rotation utilities.

All functions are pure torch and batched over leading dimensions:
quaternions are (..., 4) tensors in (w, x, y, z) order, vectors are
(..., 3).  Everything is differentiable and dtype-preserving, so the
same code path serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

import torch

_UNIT_TOL = 1e-6


def identity_quat(shape=(), dtype=torch.float32, device=None) -> torch.Tensor:
    """Identity rotation(s) of the given leading shape."""
    q = torch.zeros(*shape, 4, dtype=dtype, device=device)
    q[..., 0] = 1.0
    return q


def normalize(q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def is_unit(q: torch.Tensor, tol: float = _UNIT_TOL) -> bool:
    return bool(((q.norm(dim=-1) - 1.0).abs() <= tol).all())


def compose(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a*b: rotation b applied first, then a."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def conjugate(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack([w, -x, -y, -z], dim=-1)


def from_axis_angle(axis, angle, dtype=None) -> torch.Tensor:
    """Unit quaternion for a rotation of `angle` radians about `axis`."""
    axis = torch.as_tensor(axis, dtype=dtype)
    if dtype is None:
        dtype = axis.dtype if axis.is_floating_point() else torch.float32
        axis = axis.to(dtype)
    angle = torch.as_tensor(angle, dtype=dtype)
    axis = axis / axis.norm(dim=-1, keepdim=True)
    half = angle / 2.0
    return torch.cat(
        [torch.cos(half)[..., None], torch.sin(half)[..., None] * axis], dim=-1
    )


def from_rotvec(v: torch.Tensor) -> torch.Tensor:
    """Rotation-vector (axis * angle) to quaternion; safe at zero angle."""
    angle = v.norm(dim=-1, keepdim=True)
    half = angle / 2.0
    # sin(x)/x expanded near zero so the map stays differentiable there
    small = angle < 1e-8
    k = torch.where(small, 0.5 - angle * angle / 48.0, torch.sin(half) / angle.clamp_min(1e-30))
    return torch.cat([torch.cos(half), k * v], dim=-1)


def to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Quaternion(s) to 3x3 rotation matrices, shape (..., 3, 3)."""
    q = normalize(q)
    w, x, y, z = q.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = torch.stack(
        [
            1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
            2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
            2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
        ],
        dim=-1,
    )
    return m.reshape(*q.shape[:-1], 3, 3)


def rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Apply rotation q to vector(s) v."""
    return (to_matrix(q) @ v[..., None]).squeeze(-1)


def as_pose_rotations(rot, k: int, dtype=torch.float32) -> torch.Tensor:
    """Coerce interface rotation input to a (k, 4) unit-quaternion tensor.

    Accepts quaternions (k, 4) or axis-angle rotation vectors (k, 3);
    lists and numpy arrays are fine.  Raises on anything else.
    """
    t = torch.as_tensor(rot, dtype=dtype)
    if t.shape == (k, 4):
        if not is_unit(t):
            raise ValueError("rotation quaternions must be unit norm within 1e-6")
        return t
    if t.shape == (k, 3):
        return from_rotvec(t)
    raise ValueError(f"expected ({k}, 4) quaternions or ({k}, 3) axis-angle, got {tuple(t.shape)}")
