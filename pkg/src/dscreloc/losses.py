"""Photometric, smoothness and pose-coordinate losses and their weighted total."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import as_tensor

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class DegeneratePairError(ValueError):
    """A view-synthesis pair with no valid pixels."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85
    w_s: float = 0.001
    w_c: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.w_s < 0 or self.w_c < 0:
            raise ValueError("loss weights must be non-negative")


def _box3(x):
    # separable 3x3 mean with reflect padding
    lead = x.shape[:-2]
    x = F.pad(x.reshape(1, -1, *x.shape[-2:]), (1, 1, 1, 1), mode="reflect")
    x = x[..., :, :-2] + x[..., :, 1:-1] + x[..., :, 2:]
    x = (x[..., :-2, :] + x[..., 1:-1, :] + x[..., 2:, :]) / 9.0
    return x.reshape(*lead, *x.shape[-2:])


def ssim_map(img_a, img_b):
    """Per-pixel, per-channel SSIM over a 3x3 box window (reflect padding)."""
    a = as_tensor(img_a)
    b = as_tensor(img_b)
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    mu_a, mu_b, m_aa, m_bb, m_ab = _box3(torch.stack([a, b, a * a, b * b, a * b])).unbind(0)
    var_a = m_aa - mu_a**2
    var_b = m_bb - mu_b**2
    cov = m_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def photometric_terms(target, synthesized, valid, alpha: float = 0.85):
    """Per-item masked loss sums and valid counts for batched ``(..., C, H, W)`` inputs."""
    target = as_tensor(target)
    synthesized = as_tensor(synthesized)
    dssim = (1.0 - ssim_map(target, synthesized)).mean(-3) / 2.0
    l1 = (target - synthesized).abs().sum(-3)
    per_pixel = alpha * dssim + (1.0 - alpha) * l1
    per_pixel = torch.where(valid, per_pixel, torch.zeros_like(per_pixel))
    return per_pixel.sum((-2, -1)), valid.sum((-2, -1))


def photometric_loss(target, synthesized, valid, alpha: float = 0.85):
    """Masked SSIM + L1 mix averaged over the valid set.

    The SSIM term is averaged over channels; the L1 term is the per-pixel sum
    of absolute channel differences.
    """
    total, count = photometric_terms(target, synthesized, valid, alpha)
    if int(count) == 0:
        raise DegeneratePairError("empty valid set")
    return total / count


def smoothness_loss(depth, image):
    """Edge-aware squared first-difference penalty on raw depth.

    x and y terms are each averaged over the pixels where the forward
    difference exists, then summed.
    """
    depth = as_tensor(depth)
    image = as_tensor(image)
    if depth.shape[-2:] != image.shape[-2:]:
        raise ValueError("depth and image sizes differ")
    dx_d = depth[..., :, 1:] - depth[..., :, :-1]
    dy_d = depth[..., 1:, :] - depth[..., :-1, :]
    dx_i = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(-3)
    dy_i = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(-3)
    sx = ((torch.exp(-dx_i) * dx_d) ** 2).mean((-2, -1))
    sy = ((torch.exp(-dy_i) * dy_d) ** 2).mean((-2, -1))
    return sx + sy


def pose_coordinate_loss(pixel_poses, mean_pose):
    """Mean L2 distance of per-cell pose 6-vectors ``(..., N, 6)`` from the aggregate ``(..., 6)``."""
    pixel_poses = as_tensor(pixel_poses)
    if pixel_poses.numel() == 0:
        raise ValueError("no pixel poses")
    diff = as_tensor(mean_pose)[..., None, :] - pixel_poses
    # safe norm: zero rows give zero gradient instead of NaN
    sq = (diff * diff).sum(-1)
    nonzero = sq > 0
    norm = torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))), sq)
    return norm.mean(-1)


def total_loss(l_p, l_s, l_c, weights: LossWeights = LossWeights()):
    parts = {"photometric": l_p, "smoothness": l_s, "pose_coordinate": l_c}
    for name, val in parts.items():
        if not bool(torch.isfinite(torch.as_tensor(val)).all()):
            raise FloatingPointError(f"non-finite {name} loss: {val}")
    return l_p + weights.w_s * l_s + weights.w_c * l_c


def lcvs_pairs(frame_indices) -> list[tuple[int, int]]:
    """All ordered (target, source) pairs of a loop-closed frame set."""
    idx = list(frame_indices)
    if len(idx) < 2:
        raise ValueError("loop-closed view synthesis needs at least two frames")
    if len(set(idx)) != len(idx):
        raise ValueError(f"frame indices must be distinct: {idx}")
    return list(itertools.permutations(idx, 2))
