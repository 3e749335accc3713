"""Trajectory alignment, re-localization errors and median-scaled depth metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose


class DegenerateAlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def apply_pose(self, pose: Pose) -> Pose:
        T = np.eye(4)
        T[:3, :3] = self.rotation @ pose.rotation
        T[:3, 3] = self.apply_points(pose.position)
        return Pose.from_matrix(T)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T


def umeyama_sim3(src, dst) -> Sim3:
    """Least-squares similarity ``dst ~ s R src + t`` (Umeyama, with reflection fix)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateAlignmentError("need at least 3 correspondences")
    mu_s = src.mean(0)
    mu_d = dst.mean(0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = (xs**2).sum() / len(src)
    sv = np.linalg.svd(xs, compute_uv=False)
    if var_s <= 0 or sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateAlignmentError("source points are coincident or collinear")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return Sim3(s, R, t)


def align_trajectory(pred: list[Pose], gt: list[Pose]) -> Sim3:
    return umeyama_sim3([p.position for p in pred], [g.position for g in gt])


def per_frame_pose_errors(pred, gt, align: Sim3) -> tuple[np.ndarray, np.ndarray]:
    """Position error (scene units) and attitude error (degrees) for each frame."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions vs {len(gt)} ground-truth poses")
    pos, att = [], []
    for p, g in zip(pred, gt):
        R_al = align.rotation @ p.rotation
        pos.append(np.linalg.norm(align.apply_points(p.position) - g.position))
        rel = R_al.T @ g.rotation
        c = np.clip((np.trace(rel) - 1) / 2, -1.0, 1.0)
        att.append(np.degrees(np.arccos(c)))
    return np.asarray(pos), np.asarray(att)


def pose_errors(pred, gt, align: Sim3) -> tuple[float, float]:
    """Median position error and median attitude error in degrees."""
    pos, att = per_frame_pose_errors(pred, gt, align)
    return float(np.median(pos)), float(np.median(att))


@dataclass(frozen=True)
class DepthMetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    scale_std_over_med: float
    scale_factors: tuple[float, ...] = ()
    skipped_frames: tuple[int, ...] = ()

    HEADER = ("std/med", "abs_rel", "sq_rel", "rmse", "rmse_log", "d<1.25", "d<1.25^2", "d<1.25^3")

    def row(self) -> tuple[float, ...]:
        return (self.scale_std_over_med, self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3)

    def format_row(self) -> str:
        return " & ".join(f"{v:.3f}" for v in self.row())


def depth_metrics(pred, gt, min_d=0.1, max_d=10.0, valid=None) -> DepthMetricReport:
    """Per-frame median-scaled depth errors, averaged over frames."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted maps vs {len(gt)} ground-truth maps")
    rows, scales, skipped = [], [], []
    for i, (p, g) in enumerate(zip(pred, gt)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"frame {i}: shape {p.shape} vs {g.shape}")
        mask = (g >= min_d) & (g <= max_d)
        if valid is not None:
            mask &= np.asarray(valid[i], dtype=bool)
        if not mask.any():
            skipped.append(i)
            continue
        g = g[mask]
        p = p[mask]
        scale = np.median(g) / np.median(p)
        p = p * scale
        scales.append(scale)
        thresh = np.maximum(p / g, g / p)
        rows.append((
            np.mean(np.abs(p - g) / g),
            np.mean((p - g) ** 2 / g),
            np.sqrt(np.mean((p - g) ** 2)),
            np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)),
            np.mean(thresh < 1.25),
            np.mean(thresh < 1.25**2),
            np.mean(thresh < 1.25**3),
        ))
    if not rows:
        raise ValueError("every frame has an empty evaluation mask")
    m = np.mean(np.asarray(rows), axis=0)
    scales = np.asarray(scales)
    return DepthMetricReport(
        *(float(v) for v in m),
        scale_std_over_med=float(np.std(scales) / np.median(scales)),
        scale_factors=tuple(float(s) for s in scales),
        skipped_frames=tuple(skipped),
    )


TABLE_HEADER = ("frame", "position_error", "attitude_error_deg", "pred_x", "pred_y", "pred_z",
                "gt_x", "gt_y", "gt_z")


def trajectory_export(pred, gt, align: Sim3, path, frame_ids=None):
    """Write a top-down SVG trajectory plot and a CSV table of per-frame errors.

    ``path`` names the plot; the table goes next to it with a ``.csv`` suffix.
    Returns ``(svg_path, csv_path)``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    csv_path = path.with_suffix(".csv")
    frame_ids = list(range(len(pred))) if frame_ids is None else list(frame_ids)
    pos_err, att_err = per_frame_pose_errors(pred, gt, align)
    p_al = np.array([align.apply_points(p.position) for p in pred]).reshape(-1, 3)
    g = np.array([q.position for q in gt]).reshape(-1, 3)

    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        for fid, e_p, e_a, pp, gg in zip(frame_ids, pos_err, att_err, p_al, g):
            w.writerow([fid, repr(float(e_p)), repr(float(e_a)), *(repr(float(v)) for v in pp),
                        *(repr(float(v)) for v in gg)])

    # top-down view: x to the right, z (forward) up
    plt.rcParams["svg.hashsalt"] = "dscreloc"
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(g[:, 0], g[:, 2], "-", color="tab:blue", label="ground truth")
    for pp, gg in zip(p_al, g):
        ax.plot([pp[0], gg[0]], [pp[2], gg[2]], "-", color="0.6", lw=0.8)
    ax.plot(p_al[:, 0], p_al[:, 2], "o", color="tab:red", ms=3, label="predicted")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path, csv_path
