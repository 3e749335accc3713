import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dscreloc.losses import (
    SSIM_C1,
    SSIM_C2,
    LossWeights,
    lcvs_pairs,
    photometric_loss,
    pose_coordinate_loss,
    smoothness_loss,
    ssim_map,
    total_loss,
)


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def full_mask(h, w):
    return torch.ones((h, w), dtype=torch.bool)


def test_ssim_of_identical_images_is_one():
    img = t(np.random.default_rng(0).random((3, 6, 7)))
    assert torch.allclose(ssim_map(img, img), torch.ones_like(img), atol=1e-12)


def test_ssim_of_constants_matches_closed_form():
    a = torch.full((1, 4, 4), 0.2, dtype=torch.float64)
    b = torch.full((1, 4, 4), 0.8, dtype=torch.float64)
    expect = (2 * 0.2 * 0.8 + SSIM_C1) / (0.2**2 + 0.8**2 + SSIM_C1)
    assert torch.allclose(ssim_map(a, b), torch.tensor(expect, dtype=torch.float64), atol=1e-12)


def test_ssim_bounded_below_by_minus_one():
    rng = np.random.default_rng(1)
    a = t(rng.random((1, 8, 8)))
    s = ssim_map(a, 1.0 - a)
    assert float(s.min()) < 0
    assert float(s.min()) >= -1


def test_photometric_zero_for_identical():
    img = t(np.random.default_rng(2).random((3, 5, 5)))
    assert float(photometric_loss(img, img, full_mask(5, 5))) == 0.0


def test_alpha_zero_is_masked_l1():
    rng = np.random.default_rng(3)
    a, b = t(rng.random((3, 5, 6))), t(rng.random((3, 5, 6)))
    mask = t(rng.random((5, 6))) > 0.4
    expect = (a - b).abs().sum(0)[mask].mean()
    assert abs(float(photometric_loss(a, b, mask, alpha=0.0)) - float(expect)) < 1e-14


def _ssim_reflect_oracle(a, b):
    # explicit 3x3 windows on a reflect-padded 2x2 image
    p_a, p_b = np.pad(a, 1, mode="reflect"), np.pad(b, 1, mode="reflect")
    out = np.zeros_like(a)
    for i, j in itertools.product(range(a.shape[0]), range(a.shape[1])):
        wa, wb = p_a[i : i + 3, j : j + 3], p_b[i : i + 3, j : j + 3]
        ma, mb = wa.mean(), wb.mean()
        va, vb = (wa**2).mean() - ma**2, (wb**2).mean() - mb**2
        c = (wa * wb).mean() - ma * mb
        out[i, j] = (2 * ma * mb + SSIM_C1) * (2 * c + SSIM_C2) / ((ma**2 + mb**2 + SSIM_C1) * (va + vb + SSIM_C2))
    return out


def test_two_by_two_gray_hand_evaluation():
    a = np.array([[0.2, 0.4], [0.6, 0.8]])
    b = np.array([[0.25, 0.35], [0.7, 0.75]])
    alpha = 0.85
    per_px = alpha * (1 - _ssim_reflect_oracle(a, b)) / 2 + (1 - alpha) * np.abs(a - b)
    got = photometric_loss(t(a[None]), t(b[None]), full_mask(2, 2), alpha)
    assert abs(float(got) - per_px.mean()) < 1e-14


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_photometric_non_negative(seed, alpha):
    rng = np.random.default_rng(seed)
    a, b = t(rng.random((3, 4, 5))), t(rng.random((3, 4, 5)))
    assert float(photometric_loss(a, b, full_mask(4, 5), alpha)) >= 0


def test_smoothness_constant_depth_zero():
    img = t(np.random.default_rng(4).random((3, 3, 3)))
    assert float(smoothness_loss(torch.full((3, 3), 2.0, dtype=torch.float64), img)) == 0.0


def test_smoothness_ramp_on_flat_image():
    g = 0.7
    depth = t(g * np.arange(3)[None, :].repeat(3, 0))
    img = torch.full((3, 3, 3), 0.5, dtype=torch.float64)
    # x differences are g everywhere, y differences zero
    assert abs(float(smoothness_loss(depth, img)) - g**2) < 1e-15


def test_smoothness_edges_reduce_penalty():
    depth = t(0.7 * np.arange(3)[None, :].repeat(3, 0))
    flat = torch.full((3, 3, 3), 0.5, dtype=torch.float64)
    edges = t(np.tile([0.0, 1.0, 0.0], (3, 3, 1)))
    assert float(smoothness_loss(depth, edges)) < float(smoothness_loss(depth, flat))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_smoothness_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    d, img = t(rng.random((5, 6))), t(rng.random((3, 5, 6)))
    assert abs(float(smoothness_loss(d + c, img)) - float(smoothness_loss(d, img))) < 1e-9


def test_pose_coordinate_identical_is_zero():
    p = t(np.tile([0.1, 0.2, 0.3, 1, 2, 3], (4, 1)))
    assert float(pose_coordinate_loss(p, p[0])) == 0.0


def test_pose_coordinate_two_poses():
    p = t([[0, 0, 0, 1, 0, 0], [0, 0, 0, -1, 0, 0]])
    assert float(pose_coordinate_loss(p, t([0] * 6))) == 1.0


def test_pose_coordinate_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    p, m = rng.normal(size=(17, 6)), rng.normal(size=6)
    expect = sum(math.sqrt(sum((m[k] - row[k]) ** 2 for k in range(6))) for row in p) / 17
    assert abs(float(pose_coordinate_loss(t(p), t(m))) - expect) < 1e-12


def test_pose_coordinate_gradient_finite_at_zero_distance():
    p = t(np.zeros((3, 6))).requires_grad_(True)
    pose_coordinate_loss(p, t(np.zeros(6))).backward()
    assert bool(torch.isfinite(p.grad).all())


def test_total_loss_weights():
    assert abs(float(total_loss(t(1.0), t(10.0), t(1.0))) - 1.04) < 1e-15
    assert float(total_loss(t(0.3), t(5.0), t(7.0), LossWeights(w_s=0, w_c=0))) == 0.3


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_total_loss_linear(lp, ls, lc, k):
    w = LossWeights()
    base = float(total_loss(t(lp), t(ls), t(lc), w))
    assert math.isclose(float(total_loss(t(lp), t(ls + k), t(lc), w)) - base, w.w_s * k, abs_tol=1e-9)
    assert math.isclose(float(total_loss(t(lp), t(ls), t(lc + k), w)) - base, w.w_c * k, abs_tol=1e-9)


@pytest.mark.parametrize("bad", ["nan", "inf"])
def test_total_loss_rejects_non_finite(bad):
    with pytest.raises(FloatingPointError, match="smoothness"):
        total_loss(t(1.0), t(float(bad)), t(1.0))


def test_invalid_weights():
    with pytest.raises(ValueError):
        LossWeights(alpha=1.5)
    with pytest.raises(ValueError):
        LossWeights(w_s=-1)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_pair_counts(n):
    pairs = lcvs_pairs(range(n))
    assert len(pairs) == n * (n - 1) == len(set(pairs))
    assert all((s, t_) in pairs for t_, s in pairs)


def test_three_frames_give_six_pairs():
    assert len(lcvs_pairs([4, 9, 2])) == 6


def test_pair_errors():
    with pytest.raises(ValueError):
        lcvs_pairs([1])
    with pytest.raises(ValueError):
        lcvs_pairs([1, 1, 2])
