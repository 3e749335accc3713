"""Analytic ray-plane renderer for synthetic image/depth/pose sequences.

Scenes are closed rooms of infinite textured planes, so every ray hits
something.  Textures are sums of a few low-frequency sinusoids, which keeps
bilinear resampling error small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import Intrinsics, Pose, relative_transform
from .warp import pixel_map


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    # texture: value_c = 0.5 + sum_k amp_k sin(2 pi freq_k . (s, t) + phase_kc)
    freqs: np.ndarray  # (k, 2) cycles per scene unit
    amps: np.ndarray  # (k,)
    phases: np.ndarray  # (k, channels)

    def texture(self, s, t):
        arg = 2 * np.pi * (s[..., None] * self.freqs[:, 0] + t[..., None] * self.freqs[:, 1])
        return 0.5 + (self.amps[:, None] * np.sin(arg[..., None] + self.phases)).sum(-2)


@dataclass(frozen=True)
class PlanarScene:
    planes: tuple[Plane, ...]
    channels: int = 3


@dataclass(frozen=True)
class Trajectory:
    frame_ids: tuple[int, ...]
    poses: tuple[Pose, ...]

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.frame_ids, self.poses))


def _random_plane(rng, point, normal, axis_u, channels, n_waves=4, band=(0.3, 2.5)):
    normal = np.asarray(normal, float)
    normal = normal / np.linalg.norm(normal)
    axis_u = np.asarray(axis_u, float)
    axis_u = axis_u - normal * (axis_u @ normal)
    axis_u /= np.linalg.norm(axis_u)
    axis_v = np.cross(normal, axis_u)
    # log-uniform frequencies with 1/f amplitudes: coarse waves give a wide
    # convergence basin, fine ones pin down depth
    mags = np.exp(rng.uniform(np.log(band[0]), np.log(band[1]), n_waves))
    angles = rng.uniform(0, np.pi, n_waves)
    freqs = np.stack([mags * np.cos(angles), mags * np.sin(angles)], -1)
    amps = rng.uniform(0.5, 1.0, n_waves) / mags
    amps = 0.42 * amps / amps.sum()
    phases = rng.uniform(0, 2 * np.pi, (n_waves, channels))
    return Plane(np.asarray(point, float), normal, axis_u, axis_v, freqs, amps, phases)


def room_scene(seed=0, half_width=1.5, half_height=1.0, back=4.0, front=-1.5, channels=3):
    """Closed box ``[-hw, hw] x [-hh, hh] x [front, back]`` with a texture per wall."""
    rng = np.random.default_rng(seed)
    walls = [
        ((0, 0, back), (0, 0, -1), (1, 0, 0)),
        ((0, 0, front), (0, 0, 1), (1, 0, 0)),
        ((-half_width, 0, 0), (1, 0, 0), (0, 0, 1)),
        ((half_width, 0, 0), (-1, 0, 0), (0, 0, 1)),
        ((0, -half_height, 0), (0, 1, 0), (1, 0, 0)),
        ((0, half_height, 0), (0, -1, 0), (1, 0, 0)),
    ]
    return PlanarScene(tuple(_random_plane(rng, p, n, u, channels) for p, n, u in walls), channels)


def render_frame(scene: PlanarScene, pose: Pose, K: Intrinsics, size):
    """Render ``(image (C, H, W), z-depth (H, W))`` by nearest ray-plane hit."""
    width, height = size
    v, u = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float), indexing="ij")
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1)
    R = pose.rotation
    origin = pose.position
    dirs = rays @ R.T

    best = np.full((height, width), np.inf)
    hit_plane = np.full((height, width), -1)
    for k, pl in enumerate(scene.planes):
        denom = dirs @ pl.normal
        dist0 = (pl.point - origin) @ pl.normal
        if abs(dist0) < 1e-9:
            raise RenderError(f"camera lies on plane {k}")
        with np.errstate(divide="ignore", invalid="ignore"):
            t = dist0 / denom
        ok = (np.abs(denom) > 1e-12) & (t > 0) & (t < best)
        best = np.where(ok, t, best)
        hit_plane = np.where(ok, k, hit_plane)
    if (hit_plane < 0).any():
        raise RenderError(f"{int((hit_plane < 0).sum())} rays miss every plane")

    image = np.zeros((height, width, scene.channels))
    points = origin + best[..., None] * dirs
    for k, pl in enumerate(scene.planes):
        sel = hit_plane == k
        if not sel.any():
            continue
        rel = points[sel] - pl.point
        image[sel] = pl.texture(rel @ pl.axis_u, rel @ pl.axis_v)
    # ray z component is 1, so the ray parameter is the z-depth
    return np.clip(image, 0.0, 1.0).transpose(2, 0, 1), best


def look_at(position, target) -> Pose:
    position = np.asarray(position, float)
    f = np.asarray(target, float) - position
    f /= np.linalg.norm(f)
    x = np.cross([0.0, 1.0, 0.0], f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    T = np.eye(4)
    T[:3, :3] = np.stack([x, y, f], 1)
    T[:3, 3] = position
    return Pose.from_matrix(T)


def generate_trajectory(pattern="arc", n_frames=9, scale=None, radius=1.0, sweep=0.12):
    """Smooth camera path centred on the origin, looking roughly down +z.

    ``arc`` moves the camera along a horizontal circular arc of ``radius``
    that bends back away from the scene, covering ``sweep`` radians of arc per
    frame, while the camera yaws by ``scale`` radians per frame (default
    -0.03: against the direction of travel, so the views converge).  The strong
    path curvature keeps trajectory alignment well conditioned; the gentle
    yaw keeps neighbouring frames overlapping.  ``orbit`` adds a pitch
    oscillation and a matching vertical bob.  ``lateral`` slides sideways by
    ``scale`` scene units per frame with a fixed attitude.
    """
    if n_frames < 3:
        raise ValueError("a trajectory needs at least 3 frames")
    poses = []
    if pattern == "lateral":
        b = 0.1 if scale is None else scale
        poses = [Pose(np.zeros(3), [b * i, 0.0, 0.0]) for i in range(n_frames)]
    elif pattern in ("arc", "orbit"):
        step = -0.03 if scale is None else scale
        mid = 0.5 * (n_frames - 1)
        for i in range(n_frames):
            phi = sweep * (i - mid)
            yaw = step * (i - mid)
            pitch = 0.0
            position = radius * np.array([math.sin(phi), 0.0, math.cos(phi) - 1.0])
            if pattern == "orbit":
                wave = math.sin(2 * math.pi * i / n_frames)
                pitch = step * mid * 0.5 * wave
                position[1] = 0.25 * radius * sweep * mid * wave
            R = _rot_y(yaw) @ _rot_x(pitch)
            poses.append(Pose.from_matrix(_homogeneous(R, position)))
    else:
        raise ValueError(f"unknown trajectory pattern {pattern!r}")
    return Trajectory(tuple(range(n_frames)), tuple(poses))


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _homogeneous(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def co_visibility(scene, pose_a: Pose, pose_b: Pose, K: Intrinsics, size) -> float:
    """Fraction of frame-A pixels that land inside frame B under ground truth."""
    _, depth = render_frame(scene, pose_a, K, size)
    R, t = relative_transform(torch.as_tensor(pose_a.vector), torch.as_tensor(pose_b.vector))
    _, valid = pixel_map(torch.as_tensor(depth), R, t, K, K)
    return float(valid.double().mean())


def check_trajectory(scene, trajectory: Trajectory, K, size, min_overlap=0.3):
    poses = trajectory.poses
    for i in range(len(poses) - 1):
        frac = co_visibility(scene, poses[i], poses[i + 1], K, size)
        if frac < min_overlap:
            raise RenderError(f"frames {i} and {i + 1} share only {frac:.1%} of pixels")


@dataclass
class RenderedSequence:
    """In-memory counterpart of a loaded dataset (same attributes the fitter reads)."""

    images: np.ndarray
    depths: np.ndarray
    depth_valid: np.ndarray
    poses: list
    intrinsics: Intrinsics

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[3], self.images.shape[2]

    def __len__(self):
        return len(self.poses)


def render_sequence(scene, trajectory: Trajectory, K: Intrinsics, size) -> RenderedSequence:
    frames = [render_frame(scene, pose, K, size) for pose in trajectory.poses]
    images = np.stack([f[0] for f in frames])
    depths = np.stack([f[1] for f in frames])
    return RenderedSequence(images, depths, np.ones(depths.shape, bool), list(trajectory.poses), K)


def generate_dataset(scene, trajectory: Trajectory, K: Intrinsics, size, output_dir):
    """Render every frame and write it in the on-disk dataset layout."""
    from .dataset import write_frame, write_intrinsics

    out = Path(output_dir)
    check_trajectory(scene, trajectory, K, size)
    out.mkdir(parents=True, exist_ok=True)
    write_intrinsics(out, K)
    for frame_id, pose in trajectory:
        image, depth = render_frame(scene, pose, K, size)
        write_frame(out, frame_id, image, depth, pose)
    return out
