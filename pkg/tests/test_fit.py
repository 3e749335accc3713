import math

import numpy as np
import pytest
import torch
from torch.autograd.functional import jacobian

from dscreloc.autodiff import evaluate_with_gradient
from dscreloc.fit import (
    DEPTH_MAX,
    DEPTH_MIN,
    FitConfig,
    batch_loss,
    cell_centers,
    depth_from_logits,
    fit,
    frame_geometry,
    grid_shape,
    images_tensor,
    init_params,
    init_params_from_ground_truth,
    logits_from_depth,
    make_store,
    pooled_depth,
    predict_pose,
    sample_frame_set,
    sample_step_sets,
)
from dscreloc.geometry import Intrinsics, Pose, axis_angle_to_matrix, back_project, dsc_from_pose, pose_to_rt
from dscreloc.geometry import matrix_to_axis_angle, relative_transform
from dscreloc.losses import lcvs_pairs
from dscreloc.scene import generate_trajectory, render_sequence, room_scene
from dscreloc.warp import pixel_map

K = Intrinsics(70.0, 70.0, 39.5, 29.5)
SIZE = (80, 60)


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@pytest.fixture(scope="module")
def arc():
    return render_sequence(room_scene(0), generate_trajectory("arc", 9), K, SIZE)


def test_depth_mapping_limits():
    assert abs(float(depth_from_logits(t(-60.0))) - DEPTH_MAX) < 1e-9
    assert abs(float(depth_from_logits(t(60.0))) - DEPTH_MIN) < 1e-12
    assert abs(float(depth_from_logits(t(0.0))) - 1 / (9.99 * 0.5 + 0.01)) < 1e-15
    x = t(np.linspace(-10, 10, 101))
    d = depth_from_logits(x)
    assert bool((d[1:] < d[:-1]).all())
    assert torch.allclose(depth_from_logits(logits_from_depth(t([0.2, 1.0, 7.5]))), t([0.2, 1.0, 7.5]), rtol=1e-12)


def test_pooled_depth():
    assert torch.equal(pooled_depth(torch.full((64, 96), 3.0, dtype=torch.float64), 32),
                       torch.full((2, 3), 3.0, dtype=torch.float64))
    d = torch.zeros((32, 32), dtype=torch.float64)
    d[5, 7] = 32.0
    assert float(pooled_depth(d, 32)) == 32 / 1024
    rng = np.random.default_rng(0)
    grid = rng.random((24, 40))
    brute = np.array([[np.mean([grid[8 * j + a, 8 * i + b] for a in range(8) for b in range(8)])
                       for i in range(5)] for j in range(3)])
    np.testing.assert_allclose(pooled_depth(t(grid), 8).numpy(), brute, atol=1e-12)


def test_partial_edge_blocks_average_in_image_pixels():
    d = t(np.arange(60 * 80, dtype=float).reshape(60, 80))
    pooled = pooled_depth(d, 32)
    assert pooled.shape == (2, 3)
    assert abs(float(pooled[1, 2]) - float(d[32:, 64:].mean())) < 1e-9
    centers = cell_centers(SIZE, 32)
    assert centers[1, 2].tolist() == [(64 + 79) / 2, (32 + 59) / 2]
    assert grid_shape(SIZE, 8) == (8, 10)


def test_cell_centre_convention():
    c = cell_centers((640, 480), 32)
    assert c[0, 0].tolist() == [15.5, 15.5] and c[2, 3].tolist() == [32 * 3 + 15.5, 32 * 2 + 15.5]


def _consistent_store(pose, depth_value=1.5, factor=8):
    store = make_store(1, SIZE, factor)
    store.set("depth_logits/0", logits_from_depth(torch.full((60, 80), depth_value, dtype=torch.float64)))
    centers = cell_centers(SIZE, factor)
    depth = depth_from_logits(store.view("depth_logits/0"))
    dist = torch.linalg.norm(back_project(centers, pooled_depth(depth, factor), K), dim=-1)
    store.set("dsc/0", dsc_from_pose(t(pose.vector), dist, centers, K))
    return store


@pytest.mark.parametrize("mode", ["mean", "median"])
def test_consistent_cells_recover_pose(mode):
    pose = Pose([0.2, -0.4, 0.1], [0.5, -1.0, 2.0])
    store = _consistent_store(pose)
    got = predict_pose(store, 0, K, 8, mode)
    np.testing.assert_allclose(got.numpy(), pose.vector, atol=1e-9)


def test_median_ignores_one_corrupted_cell():
    pose = Pose([0.1, 0.3, -0.2], [1.0, 0.5, -0.5])
    store = make_store(1, (40, 40), 8)  # 5 x 5 = 25 cells
    store.set("depth_logits/0", torch.zeros((40, 40), dtype=torch.float64))
    centers = cell_centers((40, 40), 8)
    depth = depth_from_logits(store.view("depth_logits/0"))
    dist = torch.linalg.norm(back_project(centers, pooled_depth(depth, 8), K), dim=-1)
    dsc = dsc_from_pose(t(pose.vector), dist, centers, K)
    dsc[2, 3] = t([1.0, -2.0, 0.5, 9.0, 9.0, 9.0])
    store.set("dsc/0", dsc)
    np.testing.assert_allclose(predict_pose(store, 0, K, 8, "median").numpy(), pose.vector, atol=1e-9)


def test_mean_mode_is_cellwise_mean():
    rng = np.random.default_rng(1)
    store = make_store(1, SIZE, 8)
    store.values = t(rng.normal(scale=0.2, size=store.size))
    _, cells = frame_geometry(store, store.values, [0], K, 8)
    flat = cells[0].reshape(-1, 6).numpy()
    manual = np.array([np.mean([row[k] for row in flat]) for k in range(6)])
    got = predict_pose(store, 0, K, 8, "mean").numpy()
    np.testing.assert_allclose(got[3:], manual[3:], atol=1e-12)
    np.testing.assert_allclose(axis_angle_to_matrix(t(got[:3])).numpy(),
                               axis_angle_to_matrix(t(manual[:3])).numpy(), atol=1e-12)


def test_init_params():
    cfg = FitConfig(pooling_factor_px=8, position_init_noise_m=0.01, seed=3)
    a = init_params(4, SIZE, cfg)
    b = init_params(4, SIZE, cfg)
    assert torch.equal(a.values, b.values)
    assert float(a.view("depth_logits/2").abs().max()) == 0
    dsc = torch.stack([a.view(f"dsc/{i}") for i in range(4)])
    assert float(dsc[..., :3].abs().max()) == 0
    assert abs(float(dsc[..., 3:].std()) - 0.01) < 0.001
    assert not torch.equal(init_params(4, SIZE, cfg, seed=4).values, a.values)


def test_zero_dsc_pose_is_ray_length():
    cfg = FitConfig(pooling_factor_px=8, position_init_noise_m=0.0)
    store = init_params(1, SIZE, cfg)
    _, cells = frame_geometry(store, store.values, [0], K, 8)
    centers = cell_centers(SIZE, 8)
    ray_len = torch.linalg.norm(back_project(centers, torch.full(centers.shape[:2], 1.0, dtype=torch.float64), K), dim=-1)
    d = 1 / (9.99 * 0.5 + 0.01)
    assert torch.allclose(cells[0][..., 5], d * ray_len, atol=1e-12)
    assert float(cells[0][..., 3:5].abs().max()) == 0


def test_identity_pose_init_makes_cells_agree():
    cfg = FitConfig(pooling_factor_px=8, position_init_noise_m=0.0, dsc_init="identity_pose")
    store = init_params(2, SIZE, cfg, K=K)
    _, cells = frame_geometry(store, store.values, [0, 1], K, 8)
    assert float(cells.abs().max()) < 1e-12
    noisy = init_params(2, SIZE, FitConfig(pooling_factor_px=8, dsc_init="identity_pose"), K=K)
    _, cells = frame_geometry(noisy, noisy.values, [0], K, 8)
    assert float(cells[..., :3].abs().max()) < 1e-12
    assert 0.005 < float(cells[..., 3:].std()) < 0.015
    with pytest.raises(ValueError, match="intrinsics"):
        init_params(2, SIZE, cfg)


def test_six_pairs_per_three_frame_set(arc):
    cfg = FitConfig(pooling_factor_px=8)
    store = init_params(9, SIZE, cfg)
    out = batch_loss(store, store.values, images_tensor(arc), [[4, 3, 5]], K, cfg)
    assert len(out.pairs) == 6 and not out.degenerate


def test_frame_set_sampling():
    rng = np.random.default_rng(0)
    cfg = FitConfig(nearby_window_frames=2, distant_start_epoch=5, distant_fraction=1.0)
    for _ in range(200):
        fs = sample_frame_set(rng, 30, cfg, epoch=0)
        assert len(set(fs)) == 3 and all(abs(i - fs[0]) <= 2 for i in fs)
    far = [sample_frame_set(rng, 30, cfg, epoch=5) for _ in range(200)]
    assert any(abs(i - fs[0]) > 2 for fs in far for i in fs)
    edge = sample_frame_set(rng, 9, FitConfig(nearby_window_frames=1), 0, target=0)
    assert sorted(edge) == [0, 1, 2]
    with pytest.raises(ValueError):
        sample_frame_set(rng, 2, cfg, 0)


def test_sweep_sampling_targets_every_frame():
    sets = sample_step_sets(np.random.default_rng(0), 9, FitConfig(target_sampling="sweep"), 0)
    assert [s[0] for s in sets] == list(range(9))
    assert len(sample_step_sets(np.random.default_rng(0), 9, FitConfig(sets_per_step=4), 0)) == 4


def test_descent_sanity(arc):
    cfg = FitConfig(learning_rate=3e-3, depth_learning_rate=1e-2, epochs=50, steps_per_epoch=10,
                    nearby_window_frames=1, pooling_factor_px=8, seed=0)
    res = fit(arc, cfg)
    assert len(res.history) == 500 and all(math.isfinite(v) for v in res.history)
    assert res.epoch_losses[-1] < res.epoch_losses[0]


def test_fit_is_deterministic(arc):
    cfg = FitConfig(learning_rate=3e-3, epochs=3, steps_per_epoch=2, pooling_factor_px=8, seed=5)
    a, b = fit(arc, cfg), fit(arc, cfg)
    assert torch.equal(a.params.values, b.params.values) and a.history == b.history


@pytest.mark.xfail(strict=True, reason="bilinear interpolation error keeps ground truth off-stationary; see notes")
def test_ground_truth_gradient_is_tiny(arc):
    cfg = FitConfig(pooling_factor_px=8)
    images = images_tensor(arc)
    sets = [[i - 1, i, i + 1] for i in range(1, 8)]

    def grad_norm(store):
        _, g = evaluate_with_gradient(lambda x: batch_loss(store, x, images, sets, K, cfg).total, store.values)
        return float(g.norm())

    ratio = grad_norm(init_params_from_ground_truth(arc, cfg)) / grad_norm(init_params(9, SIZE, cfg))
    assert ratio < 1e-3


def test_ground_truth_gradient_is_smaller_than_random(arc):
    cfg = FitConfig(pooling_factor_px=8)
    images = images_tensor(arc)
    sets = [[i - 1, i, i + 1] for i in range(1, 8)]

    def value_and_norm(store):
        v, g = evaluate_with_gradient(lambda x: batch_loss(store, x, images, sets, K, cfg).total, store.values)
        return v, float(g.norm())

    v_gt, g_gt = value_and_norm(init_params_from_ground_truth(arc, cfg))
    v_rand, g_rand = value_and_norm(init_params(9, SIZE, cfg))
    assert v_gt < v_rand / 3 and g_gt < g_rand / 10


# --- linearized loop-closure constraints -------------------------------------


K_SMALL = Intrinsics(14.0, 14.0, 7.5, 5.5)


def _null_space_dim(pairs):
    """Null-space dimension of the reprojection Jacobian w.r.t. poses and co-visible depths."""
    seq = render_sequence(room_scene(0), generate_trajectory("arc", 3), K_SMALL, (16, 12))
    poses0 = t(np.stack([p.vector for p in seq.poses]))
    depths0 = t(seq.depths)
    # unknown depths: pixels seen by both other frames, identical for every pair set
    covis = []
    for ti in range(3):
        m = torch.ones((12, 16), dtype=torch.bool)
        for si in range(3):
            if si != ti:
                R, tr = relative_transform(poses0[ti], poses0[si])
                m &= pixel_map(depths0[ti], R, tr, K_SMALL, K_SMALL)[1]
        covis.append(m)
    sizes = [int(m.sum()) for m in covis]

    def residual(x):
        poses = x[:18].view(3, 6)
        chunks = torch.split(x[18:], sizes)
        depths = [depths0[i].masked_scatter(covis[i], chunks[i]) for i in range(3)]
        out = []
        for ti, si in pairs:
            R, tr = relative_transform(poses[ti], poses[si])
            coords, _ = pixel_map(depths[ti], R, tr, K_SMALL, K_SMALL)
            out.append(coords[covis[ti]].reshape(-1))
        return torch.cat(out)

    x0 = torch.cat([poses0.reshape(-1)] + [depths0[i][covis[i]] for i in range(3)])
    J = jacobian(residual, x0).numpy()
    s = np.linalg.svd(J, compute_uv=False)
    rank = int((s > 1e-9 * s[0]).sum())
    return J.shape[1] - rank


def test_full_loop_leaves_only_the_similarity_gauge():
    assert _null_space_dim(lcvs_pairs([0, 1, 2])) == 7


def test_two_pair_system_is_underdetermined():
    full = _null_space_dim(lcvs_pairs([0, 1, 2]))
    assert _null_space_dim([(1, 0), (1, 2)]) > full
    assert _null_space_dim(lcvs_pairs([0, 1])) > full


# --- gauge ---------------------------------------------------------------------


def _transform_cells(store, vec, frames, rotation, translation, factor):
    """DSC grids whose per-cell poses are the originals moved by a global rigid transform."""
    out = vec.clone()
    depth, cells = frame_geometry(store, vec, frames, K, factor)
    centers = cell_centers(SIZE, factor)
    dist = torch.linalg.norm(back_project(centers, pooled_depth(depth, factor), K), dim=-1)
    for k, i in enumerate(frames):
        R, p = pose_to_rt(cells[k])
        moved = torch.cat([matrix_to_axis_angle(rotation @ R), p @ rotation.T + translation], -1)
        out[store.span(f"dsc/{i}")] = dsc_from_pose(moved, dist[k], centers, K).reshape(-1)
    return out


def test_loss_invariant_to_global_rigid_transform(arc):
    cfg = FitConfig(pooling_factor_px=8)
    store = init_params_from_ground_truth(arc, cfg)
    rng = np.random.default_rng(2)
    # perturb depth only so every cell in a frame still agrees on the pose
    vec = store.values.clone()
    for i in range(9):
        vec[store.span(f"depth_logits/{i}")] += t(rng.normal(scale=0.05, size=60 * 80))
    vec = _transform_cells(store, vec, range(9), torch.eye(3, dtype=torch.float64), torch.zeros(3), 8)
    images = images_tensor(arc)
    sets = [[0, 1, 2], [3, 4, 5], [6, 7, 8], [2, 4, 7]]
    base = float(batch_loss(store, vec, images, sets, K, cfg).total)
    G = axis_angle_to_matrix(t([0.3, -0.5, 0.2]))
    moved = _transform_cells(store, vec, range(9), G, t([1.0, -2.0, 0.5]), 8)
    assert abs(float(batch_loss(store, moved, images, sets, K, cfg).total) - base) < 1e-9


def test_loss_invariant_to_global_translation_of_scattered_cells(arc):
    cfg = FitConfig(pooling_factor_px=8)
    store = init_params(9, SIZE, cfg)
    vec = store.values + t(np.random.default_rng(3).normal(scale=0.1, size=store.size))
    images = images_tensor(arc)
    sets = [[0, 1, 2], [4, 3, 5]]
    base = float(batch_loss(store, vec, images, sets, K, cfg).total)
    moved = vec.clone()
    for i in range(9):
        moved[store.span(f"dsc/{i}")].view(-1, 6)[:, 3:] += t([0.7, -0.2, 1.1])
    assert abs(float(batch_loss(store, moved, images, sets, K, cfg).total) - base) < 1e-9
