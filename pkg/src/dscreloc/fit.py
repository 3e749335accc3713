"""Direct per-frame fitting of depth-logit and directed-scene-coordinate grids.

Each frame owns a full-resolution depth-logit map and a pooled 6-channel DSC
grid.  A frame's camera pose is recovered cell by cell from the DSC grid and
the average-pooled depth, then aggregated.  Training draws loop-closed frame
sets, synthesizes every ordered pair and takes one Adam step per batch of
sets.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import AdamState, NonFiniteError, ParamStore, adam_step, evaluate_with_gradient
from .geometry import DTYPE, Intrinsics, aggregate_pose, as_tensor, back_project, dsc_from_pose, relative_transform
from .geometry import pose_from_pixel as _pose_from_pixel
from .losses import DegeneratePairError, LossWeights, lcvs_pairs, photometric_terms, pose_coordinate_loss
from .losses import smoothness_loss, total_loss
from .warp import synthesize

DEPTH_MIN = 0.1
DEPTH_MAX = 100.0
# D = 1 / (a sigma + b): sigma = 0 -> DEPTH_MAX, sigma = 1 -> DEPTH_MIN
DEPTH_B = 1.0 / DEPTH_MAX
DEPTH_A = 1.0 / DEPTH_MIN - DEPTH_B


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 1e-4
    depth_learning_rate: float = 0.0  # 0: same as learning_rate
    lr_decay_final: float = 1.0  # lr multiplier reached at the last step (exponential)
    epochs: int = 300
    steps_per_epoch: int = 0  # 0: one step per frame
    nearby_window_frames: int = 20
    distant_fraction: float = 0.5
    distant_start_epoch: int = 200
    loop_set_size: int = 3
    sets_per_step: int = 1
    target_sampling: str = "uniform"  # or "sweep": every frame is a target once per step
    ssim_alpha: float = 0.85
    smoothness_weight: float = 0.001
    pose_coordinate_weight: float = 0.03
    pooling_factor_px: int = 32
    position_init_noise_m: float = 0.01
    # "zero": zero gaze; "identity_pose": every cell encodes the identity pose at the initial depth
    dsc_init: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.nearby_window_frames < 1:
            raise ValueError("nearby_window_frames must be >= 1")
        if self.sets_per_step < 1:
            raise ValueError("sets_per_step must be >= 1")
        if self.loop_set_size < 2:
            raise ValueError("loop_set_size must be >= 2")
        if not 0.0 <= self.distant_fraction <= 1.0:
            raise ValueError("distant_fraction must lie in [0, 1]")
        if self.learning_rate <= 0 or self.depth_learning_rate < 0 or not 0 < self.lr_decay_final <= 1:
            raise ValueError("learning rates must be positive and lr_decay_final in (0, 1]")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.target_sampling not in ("uniform", "sweep"):
            raise ValueError(f"target_sampling must be 'uniform' or 'sweep', got {self.target_sampling!r}")
        if self.dsc_init not in ("zero", "identity_pose"):
            raise ValueError(f"dsc_init must be 'zero' or 'identity_pose', got {self.dsc_init!r}")
        if self.pooling_factor_px < 1:
            raise ValueError("pooling_factor_px must be >= 1")
        self.weights  # validates the loss weights

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch if self.steps_per_epoch else 0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.ssim_alpha, self.smoothness_weight, self.pose_coordinate_weight)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "FitConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown fit settings: {sorted(unknown)}")
        cast = {"float": float, "int": int, "str": str}
        out = {f.name: cast[f.type](values[f.name]) for f in fields(cls) if f.name in values}
        return cls(**out)


def depth_from_logits(logits):
    return 1.0 / (DEPTH_A * torch.sigmoid(as_tensor(logits)) + DEPTH_B)


def logits_from_depth(depth):
    depth = as_tensor(depth).clamp(DEPTH_MIN * (1 + 1e-9), DEPTH_MAX * (1 - 1e-9))
    sigma = (1.0 / depth - DEPTH_B) / DEPTH_A
    return torch.log(sigma) - torch.log1p(-sigma)


def grid_shape(size, factor) -> tuple[int, int]:
    """``(rows, cols)`` of the DSC grid for an image of ``size = (width, height)``."""
    width, height = size
    return math.ceil(height / factor), math.ceil(width / factor)


def pooled_depth(depth, factor: int):
    """Non-overlapping ``factor x factor`` block means; edge blocks average their in-image part."""
    depth = as_tensor(depth)
    lead = depth.shape[:-2]
    out = F.avg_pool2d(depth.reshape(-1, 1, *depth.shape[-2:]), factor, factor, ceil_mode=True)
    return out.reshape(*lead, *out.shape[-2:])


def cell_centers(size, factor) -> torch.Tensor:
    """Full-resolution pixel coordinate of each DSC cell: the centroid of its block."""
    width, height = size
    rows, cols = grid_shape(size, factor)
    xs = [(i * factor + min((i + 1) * factor, width) - 1) / 2 for i in range(cols)]
    ys = [(j * factor + min((j + 1) * factor, height) - 1) / 2 for j in range(rows)]
    v, u = torch.meshgrid(torch.tensor(ys, dtype=DTYPE), torch.tensor(xs, dtype=DTYPE), indexing="ij")
    return torch.stack([u, v], -1)


def make_store(n_frames: int, size, factor: int) -> ParamStore:
    width, height = size
    rows, cols = grid_shape(size, factor)
    layout = []
    for i in range(n_frames):
        layout.append((f"depth_logits/{i}", (height, width)))
        layout.append((f"dsc/{i}", (rows, cols, 6)))
    return ParamStore(layout)


def store_geometry(store: ParamStore) -> tuple[int, tuple[int, int], tuple[int, int]]:
    """``(n_frames, (width, height), (rows, cols))`` implied by a store layout."""
    n = sum(1 for name in store.layout if name.startswith("depth_logits/"))
    height, width = store.layout["depth_logits/0"][1]
    rows, cols, _ = store.layout["dsc/0"][1]
    return n, (width, height), (rows, cols)


def init_params(n_frames: int, size, config: FitConfig, seed: int | None = None, K: Intrinsics | None = None):
    """Zero depth logits; DSC positions get small zero-mean noise.

    Gaze starts at zero, or with ``dsc_init="identity_pose"`` (needs ``K``) at
    the per-cell values that make every cell imply the identity pose at the
    initial depth.  Zero gaze leaves each cell's attitude at its inverse ray
    rotation, a spread of up to half the field of view.
    """
    factor = config.pooling_factor_px
    store = make_store(n_frames, size, factor)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    rows, cols = grid_shape(size, factor)
    base = np.zeros((rows, cols, 6))
    if config.dsc_init == "identity_pose":
        if K is None:
            raise ValueError("dsc_init='identity_pose' needs the camera intrinsics")
        centers = cell_centers(size, factor)
        d0 = torch.full(centers.shape[:-1], float(depth_from_logits(torch.zeros(()))), dtype=DTYPE)
        dist = torch.linalg.norm(back_project(centers, d0, K), dim=-1)
        base = dsc_from_pose(torch.zeros(6, dtype=DTYPE), dist, centers, K).numpy()
    for i in range(n_frames):
        dsc = base.copy()
        dsc[..., 3:] += rng.normal(0.0, config.position_init_noise_m, (rows, cols, 3))
        store.set(f"dsc/{i}", dsc)
    return store


def init_params_from_ground_truth(dataset, config: FitConfig) -> ParamStore:
    """Parameters whose predicted depth and poses reproduce the dataset's ground truth."""
    size = dataset.size
    store = make_store(len(dataset), size, config.pooling_factor_px)
    K = dataset.intrinsics
    centers = cell_centers(size, config.pooling_factor_px)
    for i in range(len(dataset)):
        gt = torch.as_tensor(dataset.depths[i])
        valid = torch.as_tensor(dataset.depth_valid[i])
        fill = gt[valid].median() if bool(valid.any()) else torch.tensor(1.0, dtype=DTYPE)
        logits = logits_from_depth(torch.where(valid, gt, fill))
        store.set(f"depth_logits/{i}", logits)
        pooled = pooled_depth(depth_from_logits(logits), config.pooling_factor_px)
        dist = torch.linalg.norm(back_project(centers, pooled, K), dim=-1)
        store.set(f"dsc/{i}", dsc_from_pose(torch.as_tensor(dataset.poses[i].vector), dist, centers, K))
    return store


def frame_geometry(store: ParamStore, vec, frames, K: Intrinsics, factor: int):
    """Depth maps ``(F, H, W)`` and per-cell pose 6-vectors ``(F, rows, cols, 6)``."""
    logits = torch.stack([store.view(f"depth_logits/{i}", vec) for i in frames])
    dsc = torch.stack([store.view(f"dsc/{i}", vec) for i in frames])
    height, width = logits.shape[-2:]
    depth = depth_from_logits(logits)
    centers = cell_centers((width, height), factor)
    q = back_project(centers, pooled_depth(depth, factor), K)
    return depth, _pose_from_pixel(dsc, q, centers, K)


def predict_pose(store: ParamStore, i: int, K: Intrinsics, factor: int, mode="median", vec=None):
    _, cells = frame_geometry(store, store.values if vec is None else vec, [i], K, factor)
    return aggregate_pose(cells[0].reshape(-1, 6), mode)


def predict_depth(store: ParamStore, i: int, vec=None):
    return depth_from_logits(store.view(f"depth_logits/{i}", vec))


@dataclass
class BatchLoss:
    total: torch.Tensor
    photometric: torch.Tensor
    smoothness: torch.Tensor
    pose_coordinate: torch.Tensor
    pairs: list[tuple[int, int]]
    degenerate: list[tuple[int, int]] = field(default_factory=list)


def batch_loss(store, vec, images, frame_sets, K, config: FitConfig) -> BatchLoss:
    """Total loss of a batch of loop-closed frame sets.

    Each set contributes its pair-averaged photometric loss plus the weighted
    smoothness and pose-coordinate losses of its frames; sets are then averaged.
    Pairs without valid pixels drop out of their set's average.
    """
    weights = config.weights
    frames = sorted({i for fs in frame_sets for i in fs})
    slot = {f: k for k, f in enumerate(frames)}
    depth, cells = frame_geometry(store, vec, frames, K, config.pooling_factor_px)
    cells = cells.reshape(len(frames), -1, 6)
    pose = aggregate_pose(cells, "mean")
    frame_imgs = images[frames]
    l_s = smoothness_loss(depth, frame_imgs)
    l_c = pose_coordinate_loss(cells, pose)

    pairs = [p for fs in frame_sets for p in lcvs_pairs(fs)]
    # each distinct ordered pair is synthesized once, however many sets share it
    unique = list(dict.fromkeys(pairs))
    where = {p: k for k, p in enumerate(unique)}
    ti = torch.tensor([slot[t] for t, _ in unique])
    si = torch.tensor([slot[s] for _, s in unique])
    R, tr = relative_transform(pose[ti], pose[si])
    synth, valid = synthesize(frame_imgs[si], depth[ti], R, tr, K, K)
    u_sums, u_counts = photometric_terms(frame_imgs[ti], synth, valid, weights.alpha)
    gather = torch.tensor([where[p] for p in pairs])
    sums, counts = u_sums[gather], u_counts[gather]

    totals, lps, lss, lcs, degenerate = [], [], [], [], []
    k = 0
    for fs in frame_sets:
        n_pairs = len(fs) * (len(fs) - 1)
        c = counts[k : k + n_pairs]
        ok = c > 0
        degenerate += [pairs[k + j] for j in range(n_pairs) if not bool(ok[j])]
        if not bool(ok.any()):
            raise DegeneratePairError(f"every pair of frame set {list(fs)} is degenerate")
        per_pair = sums[k : k + n_pairs][ok] / c[ok]
        k += n_pairs
        idx = torch.tensor([slot[i] for i in fs])
        lp, ls, lc = per_pair.mean(), l_s[idx].mean(), l_c[idx].mean()
        try:
            totals.append(total_loss(lp, ls, lc, weights))
        except FloatingPointError as err:
            raise NonFiniteError(f"frame set {list(fs)}: {err}") from err
        lps.append(lp)
        lss.append(ls)
        lcs.append(lc)
    mean = lambda xs: torch.stack(xs).mean()  # noqa: E731
    return BatchLoss(mean(totals), mean(lps), mean(lss), mean(lcs), pairs, degenerate)


def set_loss(store, vec, images, frames, K, config: FitConfig) -> BatchLoss:
    return batch_loss(store, vec, images, [list(frames)], K, config)


def _companion_pool(target: int, n_frames: int, config: FitConfig, distant: bool) -> list[int]:
    if distant:
        return [i for i in range(n_frames) if i != target]
    r = config.nearby_window_frames
    pool = [i for i in range(max(0, target - r), min(n_frames, target + r + 1)) if i != target]
    if len(pool) < config.loop_set_size - 1:
        # sequence ends: widen to the nearest frames rather than the whole sequence
        others = sorted((i for i in range(n_frames) if i != target), key=lambda i: (abs(i - target), i))
        pool = sorted(others[: config.loop_set_size - 1])
    return pool


def sample_frame_set(
    rng: np.random.Generator, n_frames: int, config: FitConfig, epoch: int, target: int | None = None
) -> list[int]:
    """Target (uniform unless given) plus ``K - 1`` distinct companions from the nearby window.

    After ``distant_start_epoch`` the companions come from the whole sequence
    with probability ``distant_fraction``.
    """
    k = config.loop_set_size
    if n_frames < k:
        raise ValueError(f"need at least {k} frames, dataset has {n_frames}")
    if target is None:
        target = int(rng.integers(n_frames))
    distant = epoch >= config.distant_start_epoch and rng.random() < config.distant_fraction
    pool = _companion_pool(target, n_frames, config, distant)
    companions = rng.choice(len(pool), size=k - 1, replace=False)
    return [target] + [pool[int(c)] for c in companions]


def sample_step_sets(rng: np.random.Generator, n_frames: int, config: FitConfig, epoch: int) -> list[list[int]]:
    """The frame sets of one optimizer step."""
    if config.target_sampling == "sweep":
        return [sample_frame_set(rng, n_frames, config, epoch, target=t) for t in range(n_frames)]
    return [sample_frame_set(rng, n_frames, config, epoch) for _ in range(config.sets_per_step)]


@dataclass
class FitResult:
    params: ParamStore
    history: list[float]
    epoch_losses: list[float]


def images_tensor(dataset) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(dataset.images), dtype=DTYPE)


def learning_rate_vector(store: ParamStore, config: FitConfig) -> torch.Tensor:
    """Per-coordinate base learning rate: depth logits may run at their own rate."""
    lr = torch.full((store.size,), config.learning_rate, dtype=DTYPE)
    depth_lr = config.depth_learning_rate or config.learning_rate
    for name in store.layout:
        if name.startswith("depth_logits/"):
            lr[store.span(name)] = depth_lr
    return lr


def fit(
    dataset,
    config: FitConfig,
    params: ParamStore | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> FitResult:
    n = len(dataset)
    K = dataset.intrinsics
    images = images_tensor(dataset)
    store = params.copy() if params is not None else init_params(n, dataset.size, config, K=K)
    rng = np.random.default_rng(config.seed)
    base_lr = learning_rate_vector(store, config)
    state = AdamState.zeros(store.size, lr=base_lr)
    steps = config.steps_per_epoch or n
    total = max(config.epochs * steps - 1, 1)
    step = 0
    vec = store.values.clone()
    history, epoch_losses = [], []
    for epoch in range(config.epochs):
        acc = []
        for _ in range(steps):
            frame_sets = sample_step_sets(rng, n, config, epoch)

            def loss_fn(x, frame_sets=frame_sets):
                return batch_loss(store, x, images, frame_sets, K, config).total

            try:
                value, grad = evaluate_with_gradient(loss_fn, vec)
            except NonFiniteError as err:
                raise NonFiniteError(f"epoch {epoch}, frame sets {frame_sets}: {err}") from err
            if config.lr_decay_final != 1.0:
                state = replace(state, lr=base_lr * config.lr_decay_final ** (step / total))
            vec, state = adam_step(state, vec, grad)
            step += 1
            history.append(value)
            acc.append(value)
        epoch_losses.append(float(np.mean(acc)))
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
    return FitResult(store.copy(vec), history, epoch_losses)
