"""Depth-induced pixel mapping and differentiable bilinear resampling.

Images are ``(C, H, W)`` float64 tensors with values in ``[0, 1]``; depth maps
and masks are ``(H, W)``; pixel maps are ``(H, W, 2)`` holding ``(u, v)``.
Every function also accepts a leading batch dimension (one transform per item).
"""

from __future__ import annotations

import torch

from .geometry import DTYPE, as_tensor, intrinsics_tensor

# transformed points at or in front of this z are treated as behind the camera
EPS_Z = 1e-6
EDGE_TOL_PX = 1e-9


def pixel_grid(height: int, width: int) -> torch.Tensor:
    v, u = torch.meshgrid(
        torch.arange(height, dtype=DTYPE), torch.arange(width, dtype=DTYPE), indexing="ij"
    )
    return torch.stack([u, v], -1)


def pixel_map(depth, R, t, K_t, K_s, source_size=None):
    """Source-image coordinates of every target pixel, plus the validity mask.

    A pixel is valid when its transformed point lies in front of the source
    camera and the full 2x2 bilinear footprint falls inside the source image.
    Invalid pixels get finite placeholder coordinates.
    """
    depth = as_tensor(depth)
    R = as_tensor(R)
    t = as_tensor(t)
    H, W = depth.shape[-2:]
    Hs, Ws = source_size if source_size is not None else (H, W)
    kt = intrinsics_tensor(K_t)
    ks = intrinsics_tensor(K_s)

    uv = pixel_grid(H, W)
    x = (uv[..., 0] - kt[2]) / kt[0] * depth
    y = (uv[..., 1] - kt[3]) / kt[1] * depth
    pts = torch.stack([x, y, depth], -1)
    pts = pts @ R.transpose(-1, -2)[..., None, :, :] + t[..., None, None, :]

    z = pts[..., 2]
    in_front = z > EPS_Z
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    u_s = ks[0] * pts[..., 0] / z_safe + ks[2]
    v_s = ks[1] * pts[..., 1] / z_safe + ks[3]

    # rounding can push an exact edge coordinate a few ulp outside
    valid = (in_front & (u_s >= -EDGE_TOL_PX) & (u_s <= Ws - 1 + EDGE_TOL_PX)
             & (v_s >= -EDGE_TOL_PX) & (v_s <= Hs - 1 + EDGE_TOL_PX))
    coords = torch.stack([u_s.clamp(0, Ws - 1), v_s.clamp(0, Hs - 1)], -1)
    coords = torch.where(valid[..., None], coords, torch.zeros_like(coords))
    return coords, valid


def bilinear_sample(image, coords, mask):
    """Bilinear lookup of ``image`` at ``coords``; masked-out pixels read 0.

    The lower-left tap is clamped to ``size - 2`` so a coordinate on the last
    row/column still has an in-bounds footprint (with zero weight on the far
    taps).  Cell boundaries take the right-derivative.
    """
    image = as_tensor(image)
    coords = as_tensor(coords)
    C, Hs, Ws = image.shape[-3:]
    u = coords[..., 0]
    v = coords[..., 1]
    x0 = torch.floor(u).clamp(0, Ws - 2)
    y0 = torch.floor(v).clamp(0, Hs - 2)
    wx = (u - x0).unsqueeze(-3)
    wy = (v - y0).unsqueeze(-3)
    base = (y0.long() * Ws + x0.long()).flatten(-2).unsqueeze(-2)
    base = base.expand(*image.shape[:-2], base.shape[-1])
    flat = image.flatten(-2)

    def tap(offset):
        return torch.gather(flat, -1, base + offset).reshape(wx.shape[:-3] + (C,) + u.shape[-2:])

    out = (
        tap(0) * ((1 - wx) * (1 - wy))
        + tap(1) * (wx * (1 - wy))
        + tap(Ws) * ((1 - wx) * wy)
        + tap(Ws + 1) * (wx * wy)
    )
    return torch.where(mask.unsqueeze(-3), out, torch.zeros_like(out))


def synthesize(source, depth, R, t, K_t, K_s):
    """Reconstruct the target view from ``source`` using target depth and ``T_{t->s}``."""
    source = as_tensor(source)
    coords, valid = pixel_map(depth, R, t, K_t, K_s, source_size=source.shape[-2:])
    return bilinear_sample(source, coords, valid), valid
