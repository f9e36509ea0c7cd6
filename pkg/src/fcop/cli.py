"""Command-line front end.

Subcommands: ``stability``, ``noise-sweep``, ``estimate``, ``evaluate`` and
``render`` (writes a synthetic PNG/manifest dataset).  Exit codes: 0 success,
1 runtime failure, 2 usage error.  Log level comes from ``FCOP_LOG``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import FcopError
from .ingest import (
    DEFAULT_MAX_POINTS,
    estimate_frame,
    evaluate_dataset,
    load_frame,
    load_manifest,
    object_pose_errors,
    write_synthetic_dataset,
)
from .pose import focal_error_pct
from .robust import RobustConfig
from .synth import run_noise_sweep, run_stability_experiment

log = logging.getLogger("fcop")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _levels(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated numbers, got {text!r}")
    if not vals or any(v < 0 for v in vals) or vals != sorted(vals):
        raise argparse.ArgumentTypeError("levels must be non-empty, non-negative and ascending")
    return vals


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="worker processes; results do not depend on this value")


def _add_robust(p: argparse.ArgumentParser) -> None:
    p.add_argument("--robust", choices=("is", "ransac"), default="is")
    p.add_argument("--eps", type=_positive_float, default=5.0, help="interval half-width in pixels")
    p.add_argument("--samples-T", dest="samples_T", type=_positive_int, default=200,
                   help="triplets sampled per object")
    p.add_argument("--threshold", type=_positive_float, default=0.02, help="RANSAC inlier threshold in meters")
    p.add_argument("--ransac-iters", type=_positive_int, default=200)
    p.add_argument("--max-points", type=_positive_int, default=DEFAULT_MAX_POINTS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcop", description="Focal length from depth and object coordinates")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stability", help="noise-free solver stability experiment")
    p.add_argument("--trials", type=_positive_int, default=10_000)
    p.add_argument("--out", type=Path, required=True, help="quantile CSV; histogram goes to <stem>_hist.csv")
    _add_common(p)

    p = sub.add_parser("noise-sweep", help="focal error versus noise bound")
    p.add_argument("--axis", choices=("depth", "nocs", "both"), required=True)
    p.add_argument("--levels", type=_levels, required=True, help="comma-separated noise bounds")
    p.add_argument("--levels-p", type=_levels, default=None, help="NOC levels for --axis both")
    p.add_argument("--trials", type=_positive_int, default=500, help="trials per level")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--eps", type=_positive_float, default=5.0)
    p.add_argument("--samples-T", dest="samples_T", type=_positive_int, default=200)
    _add_common(p)

    p = sub.add_parser("estimate", help="estimate the focal length of one frame")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--frame", required=True)
    _add_robust(p)
    _add_common(p)

    p = sub.add_parser("evaluate", help="evaluate every frame of a dataset")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="writes <out>.json, <out>.csv and <out>_frames.csv")
    _add_robust(p)
    _add_common(p)

    p = sub.add_parser("render", help="write a synthetic dataset of rendered cube objects")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--frames", type=_positive_int, default=50)
    p.add_argument("--focal", type=_positive_float, default=590.0)
    p.add_argument("--objects", type=_positive_int, default=2)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _robust_cfg(args) -> RobustConfig:
    return RobustConfig(num_samples_T=args.samples_T, noise_bound_eps=args.eps, rng_seed=args.seed)


def _echo(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "threads"}


def _hist_path(out: Path) -> Path:
    return out.with_name(out.stem + "_hist" + (out.suffix or ".csv"))


def cmd_stability(args) -> int:
    dist = run_stability_experiment(args.trials, args.seed, workers=args.threads)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(dist.quantiles_csv())
    _hist_path(args.out).write_text(dist.histogram_csv())
    summary = {"config": _echo(args), "failures": dist.failures,
               "median": {m: dist.quantiles(m)["median"] for m in dist.errors}}
    print(json.dumps(summary, indent=2))
    return 0


def cmd_noise_sweep(args) -> int:
    table = run_noise_sweep(args.axis, args.levels, args.trials, args.seed, levels_p=args.levels_p,
                            robust=RobustConfig(args.samples_T, args.eps), workers=args.threads)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(table.to_csv())
    print(json.dumps({"config": _echo(args), "e_f_median": table.medians.tolist()}, indent=2))
    return 0


def cmd_estimate(args) -> int:
    manifest = load_manifest(args.manifest)
    index = next((i for i, e in enumerate(manifest.frames) if e.frame_id == args.frame), None)
    if index is None:
        raise FcopError(f"frame {args.frame!r} not in manifest")
    frame = load_frame(manifest, manifest.frames[index])
    est = estimate_frame(frame, _robust_cfg(args), args.robust, args.threshold, args.ransac_iters,
                         args.max_points, frame_index=index)
    objects = []
    for obj, oest in zip(frame.objects, est.per_object):
        entry = {"instance_id": obj.instance_id, "category": obj.category,
                 "num_correspondences": len(obj.correspondences)}
        if oest is None:
            entry["skipped"] = True
        else:
            entry.update(f_hat=oest.f, support=oest.support, num_rejected=oest.num_rejected,
                         candidates=oest.candidate_focals.tolist())
        objects.append(entry)
    out = {
        "method": est.method,
        "frame_id": frame.frame_id,
        "f_hat": est.f,
        "support": est.support,
        "num_rejected": est.num_rejected,
        "gt_focal": frame.gt_focal,
        "e_f": focal_error_pct(est.f, frame.gt_focal) if frame.gt_focal else None,
        "objects": objects,
        "pose_errors": object_pose_errors(frame, est.f, args.threshold, args.ransac_iters, args.seed,
                                          args.max_points, index),
        "skipped_instances": [k for k, _ in frame.skipped],
        "config": _echo(args),
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    report = evaluate_dataset(manifest, _robust_cfg(args), args.robust, args.threshold, args.ransac_iters,
                              args.max_points, workers=args.threads)
    report.config["manifest"] = str(args.manifest)
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(report.to_json())
    out.with_suffix(".csv").write_text(report.table_csv())
    out.with_name(out.stem + "_frames.csv").write_text(report.frames_csv())
    for r in report.frames:
        if r.status != "ok":
            log.warning("frame %s: %s", r.frame_id, r.message)
    print(json.dumps(report.to_dict()["overall"], indent=2))
    if report.frames and report.num_failed == len(report.frames):
        log.error("all %d frames failed", len(report.frames))
        return 1
    return 0


def cmd_render(args) -> int:
    path = write_synthetic_dataset(args.out, args.frames, args.seed, args.focal, args.objects)
    print(str(path))
    return 0


COMMANDS = {
    "stability": cmd_stability,
    "noise-sweep": cmd_noise_sweep,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def main(argv: list[str] | None = None) -> int:
    level = getattr(logging, os.environ.get("FCOP_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FcopError, OSError, KeyError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
