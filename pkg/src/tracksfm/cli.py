"""``sfm`` command-line driver.

Exit codes: 0 on success, 1 when a reconstruction (or a check) fails, 2 on
usage or input errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import io as sfm_io
from .errors import ContractError, ParseError, ReconstructionError, ReferentialError, SfMError
from .gradcheck import ift_check, jacobian_check
from .metrics import (accuracy_at, align_cameras, auc, auc_curve, cloud_accuracy_completeness,
                      pairwise_errors, transform_points)
from .pipeline import FORMAT_VERSION, PipelineConfig, reconstruct
from .scene import Scene
from .tracks import SyntheticConfig, generate_synthetic, load_tracks, save_tracks

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

JACOBIAN_TOL = 1e-5
IFT_TOL = 1e-3


class UsageError(Exception):
    pass


def _load_config(path, seed, query) -> PipelineConfig:
    doc = {}
    if path is not None:
        doc = sfm_io.read_json(path, "config file")
    try:
        cfg = PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if query is not None:
        overrides["query"] = query
    return PipelineConfig.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(n_frames=args.frames, n_tracks=args.tracks, noise_px=args.noise,
                          outlier_frac=args.outliers, occlusion_frac=args.occlusion,
                          seed=args.seed, image_size=(args.width, args.height),
                          focal_px=args.focal)
    save_tracks(generate_synthetic(cfg), args.output)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    scene = load_tracks(args.scene)
    config = _load_config(args.config, args.seed, args.query)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result, report = reconstruct(scene, config)
    except ReconstructionError as exc:
        sfm_io.write_json(out / "report.json", {"format_version": FORMAT_VERSION,
                                                "failure": str(exc), "config": config.to_dict()})
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    sfm_io.save_cameras(result, out / "cameras.json")
    sfm_io.write_ply(result.points, out / "points.ply")
    doc = report.to_dict()
    doc["config"] = config.to_dict()
    sfm_io.write_json(out / "report.json", doc)
    (out / "mask.json").write_text(report.mask.to_json() + "\n")
    best = report.best
    print(f"round {report.best_round}: query {best.query}, {len(best.registered)} cameras, "
          f"{best.n_points} points, mean {best.mean_px:.4f} px")
    return EXIT_OK


def _evaluate(pred, scene: Scene, auc_thresholds, rre_at, points=None, cloud_thresholds=()):
    gt = scene.truth.cameras if scene.truth is not None else scene.cameras
    if gt is None:
        raise UsageError("scene carries no ground-truth cameras")
    if len(pred) != len(gt):
        raise UsageError(f"{len(pred)} cameras for a scene with {len(gt)} frames")
    errors = pairwise_errors(pred, gt)
    rre = [e.rre for e in errors]
    rte = [e.rte for e in errors]
    row = {"pairs": len(errors),
           "registered": sum(c is not None for c in pred),
           f"RRE@{rre_at:g}": accuracy_at(rre, rre_at),
           f"RTE@{rre_at:g}": accuracy_at(rte, rre_at)}
    for T in auc_thresholds:
        row[f"AUC@{T:g}"] = auc(errors, T)
    if points is not None and cloud_thresholds:
        truth_pts = scene.truth.points if scene.truth is not None else None
        if truth_pts is None:
            raise UsageError("scene carries no ground-truth points")
        (s, R, t), _ = align_cameras(pred, gt)
        keep = np.isfinite(points).all(axis=1)
        aligned = transform_points(points[keep], s, R, t)
        for tau, (acc, comp) in zip(cloud_thresholds,
                                    cloud_accuracy_completeness(aligned, truth_pts, cloud_thresholds)):
            row[f"accuracy@{tau:g}"] = acc
            row[f"completeness@{tau:g}"] = comp
    return row, errors


def cmd_evaluate(args) -> int:
    pred = sfm_io.load_cameras(args.cameras)
    scene = load_tracks(args.scene)
    points = None
    if args.points is not None:
        points = sfm_io.points_from_ply(args.points, len(scene.tracks))
    row, errors = _evaluate(pred, scene, args.auc, args.rre_at, points, args.cloud)
    w = csv.DictWriter(sys.stdout, fieldnames=list(row), lineterminator="\n")
    w.writeheader()
    w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    if args.json is not None:
        doc = {"format_version": FORMAT_VERSION, "metrics": row,
               "pairs": [e._asdict() for e in errors]}
        sfm_io.write_json(args.json, doc)
    if args.curve is not None:
        th, acc = auc_curve(errors, max(args.auc))
        with open(args.curve, "w", newline="") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            cw.writerow(["threshold_deg", "accuracy_pct"])
            cw.writerows([[sfm_io.fmt(a), sfm_io.fmt(b)] for a, b in zip(th, acc)])
    return EXIT_OK


def cmd_export_colmap(args) -> int:
    scene = load_tracks(args.scene)
    rec = Path(args.reconstruction)
    cameras = sfm_io.load_cameras(rec / "cameras.json")
    if len(cameras) != len(scene.frames):
        raise UsageError(f"{len(cameras)} cameras for a scene with {len(scene.frames)} frames")
    points = sfm_io.points_from_ply(rec / "points.ply", len(scene.tracks))
    keep = None
    if (rec / "mask.json").exists():
        keep = np.array(json.loads((rec / "mask.json").read_text())["keep"], dtype=bool)
    result = Scene(frames=scene.frames, tracks=scene.tracks, cameras=cameras, points=points)
    omitted = sfm_io.export_colmap(result, args.output, keep=keep)
    for i in omitted:
        print(f"warning: frame {i} is unregistered and was omitted", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    jac = jacobian_check(args.samples, args.seed)
    print(f"jacobian  samples={args.samples}  max_rel_error={jac:.3e}  tol={JACOBIAN_TOL:g}")
    ift = ift_check(noise_px=args.noise, step_px=args.step, seed=args.seed)
    print(f"implicit  step={ift.step_px:g}px  max_rel_error={ift.rel_error:.3e}  tol={IFT_TOL:g}")
    return EXIT_OK if jac < JACOBIAN_TOL and ift.rel_error < IFT_TOL else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfm", description="Track-based structure from motion.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic track file")
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--tracks", type=int, default=300)
    s.add_argument("--noise", type=float, default=0.0, help="pixel noise standard deviation")
    s.add_argument("--outliers", type=float, default=0.0, help="fraction of observations")
    s.add_argument("--occlusion", type=float, default=0.0, help="fraction of observations")
    s.add_argument("--width", type=int, default=1024)
    s.add_argument("--height", type=int, default=768)
    s.add_argument("--focal", type=float, default=None, help="pixels (default 1.2 x longer side)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("reconstruct", help="reconstruct cameras and points from tracks")
    s.add_argument("scene")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("--config", default=None, help="pipeline config JSON")
    s.add_argument("--query", type=int, default=None, help="override the query frame")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 0)")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="pose (and optionally cloud) metrics as CSV")
    s.add_argument("cameras")
    s.add_argument("scene")
    s.add_argument("--auc", type=float, action="append", default=None,
                   help="AUC threshold in degrees (repeatable, default 30)")
    s.add_argument("--rre-at", type=float, default=15.0, help="accuracy threshold, degrees")
    s.add_argument("--points", default=None, help="points.ply for cloud metrics")
    s.add_argument("--cloud", type=float, action="append", default=[],
                   help="cloud distance threshold in scene units (repeatable)")
    s.add_argument("--json", default=None, help="also write metrics and per-pair errors")
    s.add_argument("--curve", default=None, help="write the accuracy curve as CSV")
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-colmap", help="write a reconstruction as COLMAP text")
    s.add_argument("scene")
    s.add_argument("reconstruction", help="directory written by 'reconstruct'")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    s.set_defaults(func=cmd_export_colmap)

    s = sub.add_parser("gradcheck", help="finite-difference checks of the derivatives")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--noise", type=float, default=0.5, help="pixel noise of the BA problem")
    s.add_argument("--step", type=float, default=1e-4, help="finite-difference step, pixels")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "auc", "") is None:
        args.auc = [30.0]
    try:
        return args.func(args)
    except (UsageError, ParseError, ReferentialError, ContractError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SfMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
