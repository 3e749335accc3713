"""Pose algebra and per-pixel camera pose recovery from directed scene coordinates.

All kernels work on float64 torch tensors with arbitrary leading batch
dimensions and are differentiable.  A pose travels through the kernels as a
6-vector ``[axis_angle; position]``; :class:`Pose` is the numpy value type used
for I/O and evaluation.

Conventions
-----------
* Camera frame: x right, y down, z forward (``e_z`` is the optical axis).
* ``T(P)`` is the camera-to-world transform ``[R(attitude) | position]``.
* Depth is z-depth, so back-projection is ``depth * K^-1 [u, v, 1]^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64

# below this sin(angle) the log map switches to its Taylor expansion
_SMALL_SIN = 1e-7


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


@dataclass(frozen=True)
class Pose:
    """Camera pose: axis-angle attitude and position (camera-to-world)."""

    attitude: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        att = np.asarray(self.attitude, dtype=np.float64).reshape(3)
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(att)) and np.all(np.isfinite(pos))):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "attitude", att)
        object.__setattr__(self, "position", pos)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(_to_numpy(vec), dtype=np.float64).reshape(6)
        return cls(vec[:3], vec[3:])

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        att = matrix_to_axis_angle(torch.as_tensor(T[:3, :3], dtype=DTYPE)).numpy()
        return cls(att, T[:3, 3])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.attitude, self.position])

    @property
    def rotation(self) -> np.ndarray:
        return axis_angle_to_matrix(torch.as_tensor(self.attitude, dtype=DTYPE)).numpy()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T


def _to_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return x


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def intrinsics_tensor(K) -> torch.Tensor:
    """``(fx, fy, cx, cy)`` as a tensor; accepts :class:`Intrinsics` or a 4-vector."""
    if isinstance(K, Intrinsics):
        return torch.tensor([K.fx, K.fy, K.cx, K.cy], dtype=DTYPE)
    return as_tensor(K)


def skew(v: torch.Tensor) -> torch.Tensor:
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [torch.stack([o, -z, y], -1), torch.stack([z, o, -x], -1), torch.stack([-y, x, o], -1)],
        -2,
    )


def axis_angle_to_matrix(aa) -> torch.Tensor:
    """Rodrigues formula ``I + sin(t)/t K + (1-cos(t))/t^2 K^2`` with ``K = [aa]_x``."""
    aa = as_tensor(aa)
    t2 = (aa * aa).sum(-1)
    small = t2 < 1e-12
    t2_safe = torch.where(small, torch.ones_like(t2), t2)
    t = torch.sqrt(t2_safe)
    a = torch.where(small, 1.0 - t2 / 6.0, torch.sin(t) / t)
    b = torch.where(small, 0.5 - t2 / 24.0, (1.0 - torch.cos(t)) / t2_safe)
    K = skew(aa)
    eye = torch.eye(3, dtype=aa.dtype).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _tie_break(axis: torch.Tensor) -> torch.Tensor:
    # half-turn: pick the representative whose first nonzero component is positive
    tol = 1e-12
    first = torch.where(
        axis[..., 0].abs() > tol,
        axis[..., 0],
        torch.where(axis[..., 1].abs() > tol, axis[..., 1], axis[..., 2]),
    )
    return torch.where((first < 0)[..., None], -axis, axis)


def matrix_to_axis_angle(R) -> torch.Tensor:
    """Canonical log map: angle in ``[0, pi]``, half-turn ties broken deterministically."""
    R = as_tensor(R)
    v = 0.5 * torch.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1
    )
    c = 0.5 * (R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1.0)
    c = c.clamp(-1.0, 1.0)
    s2 = (v * v).sum(-1)
    s = torch.sqrt(s2.clamp_min(1e-200))
    angle = torch.atan2(s, c)

    # well away from a half-turn: aa = v * angle / sin(angle)
    factor = torch.where(s2 > _SMALL_SIN**2, angle / s, 1.0 + s2 / 6.0)
    near_zero = v * factor[..., None]

    # near a half-turn the symmetric part carries the axis: B = (1 - c) n n^T
    eye = torch.eye(3, dtype=R.dtype).expand(R.shape)
    B = 0.5 * (R + R.transpose(-1, -2)) - c[..., None, None] * eye
    diag = torch.diagonal(B, dim1=-2, dim2=-1)
    k = diag.argmax(-1, keepdim=True)
    col = torch.gather(B, -1, k[..., None, :].expand(*B.shape[:-1], 1)).squeeze(-1)
    norm = torch.sqrt((col * col).sum(-1).clamp_min(1e-300))
    axis = col / norm[..., None]
    sign = torch.where((axis * v).sum(-1) < 0, -1.0, 1.0)
    axis = axis * sign[..., None]
    axis = torch.where((s2 < 1e-24)[..., None], _tie_break(axis), axis)
    near_pi = axis * angle[..., None]

    return torch.where((c < 0)[..., None], near_pi, near_zero)


def canonicalize(aa) -> torch.Tensor:
    return matrix_to_axis_angle(axis_angle_to_matrix(aa))


def pixel_rays(uv, K) -> torch.Tensor:
    """Homogeneous rays ``K^-1 [u, v, 1]^T`` (unit z component)."""
    uv = as_tensor(uv)
    k = intrinsics_tensor(K)
    x = (uv[..., 0] - k[2]) / k[0]
    y = (uv[..., 1] - k[3]) / k[1]
    return torch.stack([x, y, torch.ones_like(x)], -1)


def back_project(uv, depth, K) -> torch.Tensor:
    depth = as_tensor(depth)
    if bool((depth <= 0).any()):
        raise ValueError("back_project requires strictly positive depth")
    return depth[..., None] * pixel_rays(uv, K)


def ray_rotation(uv, K) -> torch.Tensor:
    """Minimal rotation taking ``e_z`` onto the (normalized) ray through pixel ``uv``.

    With ``w = e_z x d`` and ``c = e_z . d`` this is ``I + [w]_x + [w]_x^2 / (1 + c)``,
    which is the identity at the principal point.
    """
    ray = pixel_rays(uv, K)
    d = ray / torch.linalg.norm(ray, dim=-1, keepdim=True)
    w = torch.stack([-d[..., 1], d[..., 0], torch.zeros_like(d[..., 0])], -1)
    W = skew(w)
    eye = torch.eye(3, dtype=d.dtype).expand(W.shape)
    return eye + W + (W @ W) / (1.0 + d[..., 2])[..., None, None]


def pose_from_pixel(dsc, q, uv, K) -> torch.Tensor:
    """Camera pose 6-vector recovered at one pixel.

    ``dsc`` is the directed scene coordinate ``[gaze axis-angle; scene position]``
    and ``q`` the back-projected camera-frame point of the pixel.  The attitude
    matrix is ``R_p^T R(gaze)`` and the position is ``|q| R(gaze) e_z + scene``.
    """
    dsc = as_tensor(dsc)
    q = as_tensor(q)
    R_gaze = axis_angle_to_matrix(dsc[..., :3])
    R_p = ray_rotation(uv, K)
    attitude = matrix_to_axis_angle(R_p.transpose(-1, -2) @ R_gaze)
    dist = torch.linalg.norm(q, dim=-1, keepdim=True)
    position = dist * R_gaze[..., :, 2] + dsc[..., 3:]
    return torch.cat([attitude, position], -1)


def dsc_from_pose(pose, dist, uv, K) -> torch.Tensor:
    """Inverse of :func:`pose_from_pixel`: the DSC that yields ``pose`` at ``uv``."""
    pose = as_tensor(pose)
    dist = as_tensor(dist)
    R_gaze = ray_rotation(uv, K) @ axis_angle_to_matrix(pose[..., :3])
    gaze = matrix_to_axis_angle(R_gaze)
    scene = pose[..., 3:] - dist[..., None] * R_gaze[..., :, 2]
    return torch.cat([gaze, scene], -1)


def aggregate_pose(poses, mode: str = "mean", dim: int = -2) -> torch.Tensor:
    """Component-wise mean (training) or median (test) of pose 6-vectors along ``dim``."""
    poses = as_tensor(poses)
    if poses.shape[dim] == 0:
        raise ValueError("cannot aggregate an empty pose list")
    if mode == "mean":
        agg = poses.mean(dim)
    elif mode == "median":
        # interpolating median: even counts average the two middle values
        agg = torch.quantile(poses, 0.5, dim=dim)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return torch.cat([canonicalize(agg[..., :3]), agg[..., 3:]], -1)


def pose_to_rt(pose) -> tuple[torch.Tensor, torch.Tensor]:
    pose = as_tensor(pose)
    return axis_angle_to_matrix(pose[..., :3]), pose[..., 3:]


def relative_transform(pose_t, pose_s) -> tuple[torch.Tensor, torch.Tensor]:
    """``T(P_s)^-1 T(P_t)``: maps camera-t coordinates into camera-s coordinates."""
    R_t, p_t = pose_to_rt(pose_t)
    R_s, p_s = pose_to_rt(pose_s)
    R_sT = R_s.transpose(-1, -2)
    return R_sT @ R_t, (R_sT @ (p_t - p_s)[..., None])[..., 0]


def rotation_angle(R) -> torch.Tensor:
    """Geodesic angle of a rotation matrix, radians."""
    R = as_tensor(R)
    c = 0.5 * (torch.diagonal(R, dim1=-2, dim2=-1).sum(-1) - 1.0)
    v = 0.5 * torch.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1
    )
    return torch.atan2(torch.linalg.norm(v, dim=-1), c)
