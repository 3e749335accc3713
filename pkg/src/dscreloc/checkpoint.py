"""Versioned binary container for fitted parameter tables.

Layout::

    8 bytes   magic  b"DSCRCKPT"
    4 bytes   format version, little-endian uint32
    8 bytes   header length in bytes, little-endian uint64
    header    UTF-8 JSON: fit config, config hash, per-frame grid shapes,
              parameter count and SHA-256 of the parameter bytes
    payload   parameter vector, little-endian float64

The header is validated in full before the payload is read, so a file whose
shapes disagree with its own config is rejected without allocating the
parameter vector.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch

from .autodiff import ParamStore
from .config import config_hash
from .fit import FitConfig, grid_shape

MAGIC = b"DSCRCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


def _layout_problems(layout, factor: int) -> str | None:
    depth = {n: s for n, s in layout if n.startswith("depth_logits/")}
    dsc = {n: s for n, s in layout if n.startswith("dsc/")}
    if not depth or len(depth) != len(dsc) or len(depth) + len(dsc) != len(layout):
        return "layout must pair one depth_logits and one dsc entry per frame"
    for i in range(len(depth)):
        d, g = depth.get(f"depth_logits/{i}"), dsc.get(f"dsc/{i}")
        if d is None or g is None or len(d) != 2 or len(g) != 3:
            return f"frame {i}: missing or malformed grids"
        if tuple(d) != tuple(depth["depth_logits/0"]):
            return f"frame {i}: depth grid {d} differs from frame 0"
        height, width = d
        rows, cols = grid_shape((width, height), factor)
        if tuple(g) != (rows, cols, 6):
            return f"frame {i}: DSC grid {g} does not match {(rows, cols, 6)} for a {width}x{height} image at factor {factor}"
    return None


def save_checkpoint(path, store: ParamStore, config: FitConfig, extra: dict | None = None) -> Path:
    path = Path(path)
    cfg = config.to_dict()
    payload = store.values.detach().numpy().astype("<f8").tobytes()
    header = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "layout": [[name, list(shape)] for name, shape in store.shapes],
        "n_values": store.size,
        "param_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def read_header(path) -> dict:
    """Parse and validate the header only."""
    with open(path, "rb") as fh:
        return _read_header(fh, Path(path))


def _read_header(fh, path: Path) -> dict:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before the header")
    magic, version, length = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    blob = fh.read(length)
    if len(blob) < length:
        raise CheckpointError(f"{path}: truncated inside the header")
    try:
        header = json.loads(blob)
    except ValueError as err:
        raise CheckpointError(f"{path}: corrupt header: {err}") from err
    for key in ("config", "config_hash", "layout", "n_values", "param_sha256"):
        if key not in header:
            raise CheckpointError(f"{path}: header lacks {key!r}")
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    try:
        config = FitConfig.from_dict(header["config"])
    except (TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: invalid config: {err}") from err
    layout = [(str(n), tuple(int(v) for v in s)) for n, s in header["layout"]]
    problem = _layout_problems(layout, config.pooling_factor_px)
    if problem:
        raise CheckpointError(f"{path}: {problem}")
    if sum(math.prod(s) for _, s in layout) != header["n_values"]:
        raise CheckpointError(f"{path}: parameter count disagrees with the grid shapes")
    header["layout"] = layout
    header["fit_config"] = config
    return header


def load_checkpoint(path) -> tuple[ParamStore, FitConfig, dict]:
    """Returns ``(store, config, header)``; raises :class:`CheckpointError` on any inconsistency."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as err:
        raise CheckpointError(f"cannot open checkpoint {path}: {err}") from err
    with fh:
        header = _read_header(fh, path)
        n = header["n_values"]
        payload = fh.read(8 * n + 1)
    if len(payload) < 8 * n:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {8 * n} bytes)")
    if len(payload) > 8 * n:
        raise CheckpointError(f"{path}: trailing bytes after the payload")
    if hashlib.sha256(payload).hexdigest() != header["param_sha256"]:
        raise CheckpointError(f"{path}: parameter hash mismatch")
    values = torch.from_numpy(np.frombuffer(payload, dtype="<f8").astype(np.float64))
    return ParamStore(header["layout"], values), header["fit_config"], header
