"""Finite-difference checks of every differentiable kernel and the composed loss.

Each case wraps one operation as a scalar function of a flat input vector
(tensor outputs are contracted with fixed random weights) and compares the
autograd gradient with central differences on sampled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import GradCheckReport, finite_difference_check
from .fit import FitConfig, batch_loss, depth_from_logits, images_tensor, init_params_from_ground_truth, pooled_depth
from .geometry import (
    DTYPE,
    Intrinsics,
    aggregate_pose,
    axis_angle_to_matrix,
    back_project,
    matrix_to_axis_angle,
    pose_from_pixel,
    ray_rotation,
    relative_transform,
)
from .losses import photometric_loss, pose_coordinate_loss, smoothness_loss, ssim_map
from .scene import generate_trajectory, render_sequence, room_scene
from .warp import bilinear_sample, pixel_map, synthesize

SUITE_DEFAULTS = {
    "size_px": "24x18",
    "frames": 3,
    "pooling_factor_px": 6,
    "scene_seed": 0,
    "seed": 0,
    "step": 1e-5,
    "tolerance": 1e-4,
    "perturbation": 0.02,
}


@dataclass
class SuiteCase:
    name: str
    report: GradCheckReport

    def passed(self, tol: float) -> bool:
        return self.report.passed(tol)


def _contract(out: torch.Tensor, seed: int) -> torch.Tensor:
    w = torch.as_tensor(np.random.default_rng(seed).normal(size=tuple(out.shape)), dtype=DTYPE)
    return (out * w).sum()


def _parse_size(text) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError as err:
        raise ValueError(f"size must look like WIDTHxHEIGHT, got {text!r}") from err
    return w, h


def resolve_settings(values: dict | None = None) -> dict:
    out = dict(SUITE_DEFAULTS)
    for key, val in (values or {}).items():
        if key not in out:
            raise ValueError(f"unknown grad-check setting {key!r}")
        out[key] = type(SUITE_DEFAULTS[key])(val)
    _parse_size(out["size_px"])
    return out


def _cases(settings: dict):
    """Yield ``(name, fn, x0)`` for every checked operation."""
    rng = np.random.default_rng(settings["seed"])
    width, height = _parse_size(settings["size_px"])
    K = Intrinsics(0.875 * width, 0.875 * width, (width - 1) / 2, (height - 1) / 2)
    t = lambda a: torch.as_tensor(np.asarray(a, float), dtype=DTYPE)  # noqa: E731
    uv = t(rng.uniform([0, 0], [width - 1, height - 1], (60, 2)))

    aa = t(rng.normal(size=(60, 3)))
    yield "axis_angle_to_matrix", lambda x: _contract(axis_angle_to_matrix(x.view(-1, 3)), 1), aa.reshape(-1)

    # log map on matrices near SO(3), away from the half-turn branch switch
    base = axis_angle_to_matrix(t(rng.normal(scale=0.8, size=(40, 3))))
    yield "matrix_to_axis_angle", lambda x: _contract(matrix_to_axis_angle(x.view(-1, 3, 3)), 2), base.reshape(-1)

    depth = t(rng.uniform(0.5, 5.0, 60))
    x0 = torch.cat([uv.reshape(-1), depth])
    yield "back_project", lambda x: _contract(back_project(x[:120].view(-1, 2), x[120:], K), 3), x0

    yield "ray_rotation", lambda x: _contract(ray_rotation(x.view(-1, 2), K), 4), uv.reshape(-1)

    dsc = t(np.concatenate([rng.normal(scale=0.5, size=(60, 3)), rng.normal(size=(60, 3))], 1))
    q = back_project(uv, depth, K)

    def pose_fn(x):
        return _contract(pose_from_pixel(x[:360].view(-1, 6), x[360:540].view(-1, 3), x[540:].view(-1, 2), K), 5)

    yield "pose_from_pixel", pose_fn, torch.cat([dsc.reshape(-1), q.reshape(-1), uv.reshape(-1)])

    cells = t(np.concatenate([rng.normal(scale=0.3, size=(8, 12, 3)), rng.normal(size=(8, 12, 3))], -1))
    yield "aggregate_pose_mean", lambda x: _contract(aggregate_pose(x.view(8, 12, 6), "mean"), 6), cells.reshape(-1)

    pair = t(np.concatenate([rng.normal(scale=0.5, size=(2, 20, 3)), rng.normal(size=(2, 20, 3))], -1))

    def rel_fn(x):
        p = x.view(2, 20, 6)
        R, tr = relative_transform(p[0], p[1])
        return _contract(R, 7) + _contract(tr, 8)

    yield "relative_transform", rel_fn, pair.reshape(-1)

    # warping inputs come from the rendered scene so the mask is non-trivial
    seq = render_sequence(
        room_scene(settings["scene_seed"]), generate_trajectory("arc", settings["frames"]), K, (width, height)
    )
    images = images_tensor(seq)
    gt_depth = t(seq.depths[0])
    R01, t01 = relative_transform(t(seq.poses[0].vector), t(seq.poses[1].vector))
    motion = torch.cat([matrix_to_axis_angle(R01), t01])
    n_px = height * width

    def map_fn(x):
        coords, _ = pixel_map(x[:n_px].view(height, width), axis_angle_to_matrix(x[n_px : n_px + 3]), x[n_px + 3 :], K, K)
        return _contract(coords, 9)

    yield "pixel_map", map_fn, torch.cat([gt_depth.reshape(-1), motion])

    coords, valid = pixel_map(gt_depth, R01, t01, K, K)
    source = images[1]
    n_img = source.numel()

    def sample_fn(x):
        return _contract(bilinear_sample(x[:n_img].view_as(source), x[n_img:].view_as(coords), valid), 10)

    yield "bilinear_sample", sample_fn, torch.cat([source.reshape(-1), coords.reshape(-1)])

    def synth_fn(x):
        img, _ = synthesize(
            source, x[:n_px].view(height, width), axis_angle_to_matrix(x[n_px : n_px + 3]), x[n_px + 3 :], K, K
        )
        return _contract(img, 11)

    yield "synthesize", synth_fn, torch.cat([gt_depth.reshape(-1), motion])

    noisy = (images[0] + t(rng.normal(scale=0.05, size=tuple(images[0].shape)))).reshape(-1)
    target = images[0].reshape(-1)

    def ssim_fn(x):
        return _contract(ssim_map(x[:n_img].view_as(source), x[n_img:].view_as(source)), 12)

    yield "ssim_map", ssim_fn, torch.cat([target, noisy])

    alpha = FitConfig().ssim_alpha
    mask = t(rng.random((height, width))) > 0.2

    def photo_fn(x):
        return photometric_loss(x[:n_img].view_as(source), x[n_img:].view_as(source), mask, alpha)

    yield "photometric_loss", photo_fn, torch.cat([target, noisy])

    def smooth_fn(x):
        return smoothness_loss(x[:n_px].view(height, width), x[n_px:].view_as(source))

    yield "smoothness_loss", smooth_fn, torch.cat([gt_depth.reshape(-1), target])

    def coord_fn(x):
        p = x[:-6].view(-1, 6)
        return pose_coordinate_loss(p, x[-6:])

    yield "pose_coordinate_loss", coord_fn, torch.cat([cells.reshape(-1), cells.reshape(-1, 6).mean(0) + 0.01])

    logits = t(rng.normal(scale=2.0, size=200))
    yield "depth_from_logits", lambda x: _contract(depth_from_logits(x), 13), logits

    factor = settings["pooling_factor_px"]
    yield "pooled_depth", lambda x: _contract(pooled_depth(x.view(height, width), factor), 14), gt_depth.reshape(-1)

    # composed total loss over all parameters, near ground truth
    config = FitConfig(pooling_factor_px=factor, loop_set_size=min(3, settings["frames"]))
    store = init_params_from_ground_truth(seq, config)
    vec = store.values + settings["perturbation"] * t(rng.normal(size=store.size))
    frames = list(range(config.loop_set_size))

    def total_fn(x):
        return batch_loss(store, x, images, [frames], K, config).total

    yield "total_loss", total_fn, vec


def run_suite(settings: dict | None = None, samples: int = 100, names=None) -> list[SuiteCase]:
    settings = resolve_settings(settings)
    out = []
    for k, (name, fn, x0) in enumerate(_cases(settings)):
        if names is not None and name not in names:
            continue
        report = finite_difference_check(
            fn, x0, sample_count=samples, h=settings["step"], seed=settings["seed"] + k
        )
        out.append(SuiteCase(name, report))
    return out
