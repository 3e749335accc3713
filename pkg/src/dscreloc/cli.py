"""Command-line entry points.

Exit codes: 0 success, 1 a check failed (grad-check above tolerance),
2 invalid command line, 3 unreadable or inconsistent input, 4 the fit diverged
(non-finite loss, or a frame set left without any valid pixel).
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, read_kv, write_kv
from .dataset import DatasetError, load_dataset
from .fit import FitConfig, fit, predict_depth, predict_pose, store_geometry
from .geometry import Intrinsics, Pose
from .losses import DegeneratePairError
from .metrics import DegenerateAlignmentError, align_trajectory, depth_metrics, pose_errors, trajectory_export
from .scene import RenderError, generate_dataset, generate_trajectory, room_scene

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4

INTRINSIC_KEYS = ("fx_px", "fy_px", "cx_px", "cy_px")

# settings that make the 9-frame 80x60 synthetic arc converge on one CPU core
DESK_FIT = {
    "learning_rate": 3e-3,
    "depth_learning_rate": 1e-2,
    "lr_decay_final": 0.02,
    "epochs": 2500,
    "steps_per_epoch": 1,
    "nearby_window_frames": 1,
    "distant_start_epoch": 10**9,
    "target_sampling": "sweep",
    "pooling_factor_px": 8,
    "dsc_init": "identity_pose",
}


class InputError(RuntimeError):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    if w < 2 or h < 2:
        raise argparse.ArgumentTypeError("image must be at least 2x2")
    return w, h


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _manifest_path(output: Path) -> Path:
    return output.with_name(output.name + ".config.txt")


def _write_manifest(path: Path, values: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_kv(path, {k: v for k, v in values.items() if v is not None})


def load_run_config(path) -> tuple[FitConfig, Intrinsics | None, str]:
    """Fit settings plus optional intrinsics (``fx_px`` ...) and ``split`` from a key-value file."""
    values = read_kv(path) if path is not None else dict(DESK_FIT)
    values = dict(values)
    split = str(values.pop("split", "train"))
    intr = [values.pop(k, None) for k in INTRINSIC_KEYS]
    if any(v is not None for v in intr):
        if any(v is None for v in intr):
            raise ConfigError(f"{path}: intrinsics need all of {', '.join(INTRINSIC_KEYS)}")
        K = Intrinsics(*(float(v) for v in intr))
    else:
        K = None
    try:
        return FitConfig.from_dict(values), K, split
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


def _run_values(config: FitConfig, K: Intrinsics | None, split: str) -> dict:
    out = dict(config.to_dict())
    out["split"] = split
    if K is not None:
        out.update(zip(INTRINSIC_KEYS, (K.fx, K.fy, K.cx, K.cy)))
    return out


def cmd_gen_scene(args) -> int:
    width, height = args.size
    f = args.focal_px if args.focal_px is not None else 0.875 * width
    K = Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2)
    trajectory = generate_trajectory(args.pattern, args.frames)
    generate_dataset(room_scene(args.seed), trajectory, K, (width, height), args.out)
    _write_manifest(
        Path(args.out) / "gen-scene.config.txt",
        {"pattern": args.pattern, "frames": args.frames, "width_px": width, "height_px": height,
         "seed": args.seed, "fx_px": K.fx, "fy_px": K.fy, "cx_px": K.cx, "cy_px": K.cy},
    )
    print(f"wrote {args.frames} frames ({width}x{height}) to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    config, K, split = load_run_config(args.config)
    if args.epochs is not None:
        config = FitConfig.from_dict({**config.to_dict(), "epochs": args.epochs})
    dataset = load_dataset(args.data, split, K)
    out = Path(args.out)
    _write_manifest(_manifest_path(out), {**_run_values(config, K, split), "data": str(args.data)})

    def report(epoch, loss):
        if not math.isfinite(loss):
            raise NonFiniteError(f"epoch {epoch}: non-finite loss {loss}")
        if epoch % args.print_every == 0 or epoch == config.epochs - 1:
            print(f"epoch {epoch:5d}  loss {loss:.6f}", flush=True)

    start = time.perf_counter()
    result = fit(dataset, config, on_epoch=report)
    save_checkpoint(out, result.params, config, {"frame_ids": dataset.frame_ids, "split": split})
    print(f"saved {out} after {len(result.history)} steps ({time.perf_counter() - start:.1f} s)")
    return EXIT_OK


def _load_eval_inputs(args):
    store, config, header = load_checkpoint(args.ckpt)
    _, K, split = load_run_config(args.config) if args.config else (None, None, header["extra"].get("split", "train"))
    dataset = load_dataset(args.data, split, K)
    n, size, _ = store_geometry(store)
    if n != len(dataset) or tuple(size) != tuple(dataset.size):
        raise InputError(
            f"checkpoint holds {n} frames of {size[0]}x{size[1]}, dataset has {len(dataset)} of "
            f"{dataset.size[0]}x{dataset.size[1]}"
        )
    return store, config, dataset


def cmd_eval_pose(args) -> int:
    store, config, dataset = _load_eval_inputs(args)
    K = dataset.intrinsics
    pred = [
        Pose.from_vector(predict_pose(store, i, K, config.pooling_factor_px, args.mode).numpy())
        for i in range(len(dataset))
    ]
    align = align_trajectory(pred, dataset.poses)
    pos, att = pose_errors(pred, dataset.poses, align)
    gt_pos = np.array([p.position for p in dataset.poses])
    diameter = max(float(np.linalg.norm(a - b)) for a in gt_pos for b in gt_pos)
    print("scene | median position (m), attitude (deg) | position / diameter")
    print(f"{Path(args.data).name} | {pos:.4f}m, {att:.3f}deg | {pos / diameter:.4f}")
    if args.plot:
        svg, table = trajectory_export(pred, dataset.poses, align, args.plot, dataset.frame_ids)
        _write_manifest(
            _manifest_path(Path(args.plot)),
            {"ckpt": str(args.ckpt), "data": str(args.data), "mode": args.mode, "align_scale": align.scale},
        )
        print(f"wrote {svg} and {table}")
    return EXIT_OK


def cmd_eval_depth(args) -> int:
    store, _, dataset = _load_eval_inputs(args)
    pred = [predict_depth(store, i).numpy() for i in range(len(dataset))]
    report = depth_metrics(pred, dataset.depths, args.min, args.max, valid=dataset.depth_valid)
    print(" & ".join(report.HEADER))
    print(report.format_row())
    if report.skipped_frames:
        print(f"skipped frames with empty masks: {list(report.skipped_frames)}")
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(",".join(report.HEADER) + "\n" + ",".join(repr(v) for v in report.row()) + "\n")
        _write_manifest(
            _manifest_path(path),
            {"ckpt": str(args.ckpt), "data": str(args.data), "min_m": args.min, "max_m": args.max},
        )
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import resolve_settings, run_suite

    values = read_kv(args.config) if args.config else {}
    try:
        settings = resolve_settings(values)
    except ValueError as err:
        raise ConfigError(f"{args.config}: {err}") from err
    tol = args.tol if args.tol is not None else settings["tolerance"]
    failed = 0
    for case in run_suite(settings, args.samples):
        r = case.report
        ok = r.rel_errors.size >= args.samples and r.max_rel_error < tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {case.name:24s} coords {r.rel_errors.size:4d}  "
              f"max rel {r.max_rel_error:.2e}  median {r.median_rel_error:.2e}  kinks skipped {r.rejected}")
    print(f"{failed} of the cases exceed rel. error {tol:g}" if failed else f"all cases below rel. error {tol:g}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dscreloc",
        description="Fit per-frame depth and directed scene coordinates to an image sequence, then evaluate.",
        epilog="exit codes: 0 ok, 1 check failed, 2 usage, 3 bad input, 4 fit diverged",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic RGB-D sequence")
    p.add_argument("--pattern", choices=("arc", "orbit", "lateral"), default="arc")
    p.add_argument("--frames", type=_positive_int, default=9)
    p.add_argument("--size", type=_size, default=(80, 60), metavar="WxH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--focal-px", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("fit", help="fit depth and DSC tables to a sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key-value file; omitted: the desk-scale preset")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    p.add_argument("--print-every", type=_positive_int, default=100)
    p.set_defaults(func=cmd_fit)

    for name, func, help_text in (
        ("eval-pose", cmd_eval_pose, "Sim(3)-aligned median pose errors"),
        ("eval-depth", cmd_eval_depth, "median-scaled depth metrics"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--config", default=None, help="supplies intrinsics and split when the data lacks them")
        if name == "eval-pose":
            p.add_argument("--mode", choices=("median", "mean"), default="median")
            p.add_argument("--plot", default=None, metavar="OUT.svg")
        else:
            p.add_argument("--min", type=float, default=0.1)
            p.add_argument("--max", type=float, default=10.0)
            p.add_argument("--csv", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--config", default=None)
    p.add_argument("--samples", type=_positive_int, default=100)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteError, DegeneratePairError) as err:
        print(f"error: fit diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DatasetError, CheckpointError, InputError, RenderError, DegenerateAlignmentError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
