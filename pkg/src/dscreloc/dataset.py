"""On-disk RGB-D sequence layout shared by real (7-scenes) and synthetic data.

Per frame::

    frame-000000.color.png   8-bit RGB
    frame-000000.depth.png   16-bit depth in millimetres, 65535 = invalid
    frame-000000.pose.txt    4x4 camera-to-world matrix, whitespace separated

A directory either holds these files directly or, 7-scenes style, lists
sequence folders in ``TrainSplit.txt`` / ``TestSplit.txt`` (``sequence1`` ->
``seq-01``).  Intrinsics are never guessed: they come from the caller or from
an ``intrinsics.txt`` key-value file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, dump_kv, read_kv
from .geometry import Intrinsics, Pose

DEPTH_INVALID = 65535
_FRAME_RE = re.compile(r"frame-(\d+)\.color\.png$")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    color_path: Path
    depth_path: Path
    pose_path: Path


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[FrameRecord, ...]
    intrinsics: Intrinsics
    split: str


@dataclass
class Dataset:
    index: DatasetIndex
    images: np.ndarray  # (N, 3, H, W) in [0, 1]
    depths: np.ndarray  # (N, H, W) metres, 0 where invalid
    depth_valid: np.ndarray  # (N, H, W) bool
    poses: list[Pose]

    @property
    def intrinsics(self) -> Intrinsics:
        return self.index.intrinsics

    @property
    def frame_ids(self) -> list[int]:
        return [r.frame_id for r in self.index.records]

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[3], self.images.shape[2]

    def __len__(self):
        return len(self.poses)


def frame_stem(frame_id: int) -> str:
    return f"frame-{frame_id:06d}"


def write_pose(path, pose: Pose):
    T = pose.matrix()
    lines = [" ".join(f"{v:.17g}" for v in row) for row in T]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose(path, tol=1e-3) -> Pose:
    path = Path(path)
    try:
        T = np.loadtxt(path, dtype=np.float64)
    except (OSError, ValueError) as err:
        raise DatasetError(f"{path}: cannot parse pose matrix ({err})") from err
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        raise DatasetError(f"{path}: expected a finite 4x4 matrix, got shape {T.shape}")
    R = T[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
        raise DatasetError(f"{path}: rotation block is not orthonormal within {tol}")
    if np.abs(T[3] - [0, 0, 0, 1]).max() > tol:
        raise DatasetError(f"{path}: last row must be 0 0 0 1")
    return Pose.from_matrix(T)


def encode_depth(depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    mm = np.round(np.nan_to_num(depth, nan=-1.0) * 1000.0)
    bad = ~np.isfinite(depth) | (mm <= 0) | (mm >= DEPTH_INVALID)
    return np.where(bad, DEPTH_INVALID, mm).astype(np.uint16)


def decode_depth(raw) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw)
    valid = (raw != DEPTH_INVALID) & (raw > 0)
    return np.where(valid, raw.astype(np.float64) / 1000.0, 0.0), valid


def write_frame(root, frame_id, image, depth, pose: Pose):
    root = Path(root)
    stem = frame_stem(frame_id)
    rgb = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    try:
        Image.fromarray(rgb, mode="RGB").save(root / f"{stem}.color.png")
        Image.fromarray(encode_depth(depth)).save(root / f"{stem}.depth.png")
        write_pose(root / f"{stem}.pose.txt", pose)
    except OSError as err:
        raise DatasetError(f"cannot write frame {stem} under {root}: {err}") from err


def write_intrinsics(root, K: Intrinsics):
    text = dump_kv({"fx_px": K.fx, "fy_px": K.fy, "cx_px": K.cx, "cy_px": K.cy})
    (Path(root) / "intrinsics.txt").write_text(text)


def read_intrinsics(path) -> Intrinsics:
    try:
        kv = read_kv(path)
        return Intrinsics(float(kv["fx_px"]), float(kv["fy_px"]), float(kv["cx_px"]), float(kv["cy_px"]))
    except (KeyError, ConfigError) as err:
        raise DatasetError(f"{path}: bad intrinsics file ({err})") from err


def _frame_dirs(root: Path, split: str) -> list[Path]:
    split_file = root / ("TrainSplit.txt" if split == "train" else "TestSplit.txt")
    if not split_file.exists():
        return [root]
    dirs = []
    for line in split_file.read_text().split():
        m = re.fullmatch(r"sequence(\d+)", line.strip())
        if not m:
            raise DatasetError(f"{split_file}: unexpected entry {line!r}")
        dirs.append(root / f"seq-{int(m.group(1)):02d}")
    return dirs


def index_dataset(root, split="train", intrinsics: Intrinsics | None = None) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    if intrinsics is None:
        if not (root / "intrinsics.txt").exists():
            raise DatasetError(f"{root}: no intrinsics given and no intrinsics.txt present")
        intrinsics = read_intrinsics(root / "intrinsics.txt")
    records = []
    offset = 0
    for d in _frame_dirs(root, split):
        if not d.is_dir():
            raise DatasetError(f"missing sequence directory {d}")
        ids = sorted(int(m.group(1)) for p in d.iterdir() if (m := _FRAME_RE.search(p.name)))
        for fid in ids:
            stem = frame_stem(fid)
            rec = FrameRecord(offset + fid, d / f"{stem}.color.png", d / f"{stem}.depth.png", d / f"{stem}.pose.txt")
            for p in (rec.depth_path, rec.pose_path):
                if not p.exists():
                    raise DatasetError(f"missing file {p}")
            records.append(rec)
        if ids:
            offset = records[-1].frame_id + 1
    if not records:
        raise DatasetError(f"no frames found under {root}")
    return DatasetIndex(tuple(records), intrinsics, split)


def load_dataset(root, split="train", intrinsics: Intrinsics | None = None) -> Dataset:
    index = index_dataset(root, split, intrinsics)
    images, depths, valids, poses = [], [], [], []
    shape = None
    for rec in index.records:
        try:
            with Image.open(rec.color_path) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            with Image.open(rec.depth_path) as im:
                raw = np.asarray(im)
        except OSError as err:
            raise DatasetError(f"cannot decode {rec.color_path} / {rec.depth_path}: {err}") from err
        if shape is None:
            shape = rgb.shape[:2]
        if rgb.shape[:2] != shape:
            raise DatasetError(f"{rec.color_path}: size {rgb.shape[:2]} differs from {shape}")
        if raw.shape != shape:
            raise DatasetError(f"{rec.depth_path}: size {raw.shape} differs from colour {shape}")
        depth, valid = decode_depth(raw)
        images.append(rgb.transpose(2, 0, 1))
        depths.append(depth)
        valids.append(valid)
        poses.append(read_pose(rec.pose_path))
    return Dataset(index, np.stack(images), np.stack(depths), np.stack(valids), poses)
