"""Command-line pipeline: synth -> match -> register -> evaluate, or all at once with e2e.

Reports go to stdout (and to ``--out`` when given) as sorted-key JSON or as
flattened ``key,value`` CSV. They hold no timings or paths, so runs with the
same seed are byte-identical whatever ``--threads`` is.

Exit codes: 0 ok, 2 input format, 3 empty mask / no matches,
4 registration failure, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .errors import InputFormatError, RelPoseError
from .geometry import RigidTransform
from .matching import match_feature_maps
from .pipeline import PipelineConfig, evaluate_relative_pose, pose_to_dict, register_matches, run_scene
from .synth import SyntheticSceneSpec, make_scene_pair

log = logging.getLogger("relpose")

EXIT_OK = 0


# -- spec files -------------------------------------------------------------------

def _pose_from_json(value, key):
    if not isinstance(value, dict):
        raise InputFormatError(f"spec key {key!r} must be an object with rotation and translation")
    rot = np.asarray(value.get("rotation"), dtype=float)
    trans = np.asarray(value.get("translation"), dtype=float)
    if rot.size != 9 or trans.size != 3:
        raise InputFormatError(f"spec key {key!r} needs 9 rotation and 3 translation numbers")
    return RigidTransform(rot.reshape(3, 3), trans)


def spec_from_json_dict(data: dict) -> SyntheticSceneSpec:
    if not isinstance(data, dict):
        raise InputFormatError("scene spec must be a JSON object")
    known = {f.name for f in fields(SyntheticSceneSpec)}
    unknown = set(data) - known
    if unknown:
        raise InputFormatError(f"unknown scene spec keys: {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("pose_a", "pose_q"):
        if kwargs.get(key) is not None:
            kwargs[key] = _pose_from_json(kwargs[key], key)
    try:
        return SyntheticSceneSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InputFormatError(f"invalid scene spec: {exc}") from exc


def load_spec(path, seed: int | None = None) -> SyntheticSceneSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"{path}: cannot read scene spec: {exc}") from exc
    if seed is not None:
        data = {**data, "seed": seed}
    return spec_from_json_dict(data)


# -- reports ----------------------------------------------------------------------

def _flatten(value, prefix=""):
    if isinstance(value, dict):
        for key in sorted(value):
            yield from _flatten(value[key], f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _flatten(item, f"{prefix}.{i}")
    else:
        yield prefix, value


def format_report(report: dict, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n"
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value"])
    for key, value in _flatten(report):
        writer.writerow([key, value if isinstance(value, str) else json.dumps(value)])
    return buf.getvalue()


def _emit(report: dict, args, name: str) -> None:
    text = format_report(report, args.format)
    sys.stdout.write(text)
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"{name}_report.{args.format}").write_text(text, encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config) if args.config else PipelineConfig()


# -- commands ---------------------------------------------------------------------

def write_scene(scene, out: Path) -> io.ScenePairManifest:
    """Serialize a :class:`ScenePair` to ``out`` and return its manifest."""
    views = {}
    for name, suffix in (("anchor", "a"), ("query", "q")):
        files = {
            "depth": out / f"{name}_depth.png",
            "mask": out / f"{name}_mask.png",
            "features": out / f"{name}_features.fmap",
            "intrinsics": out / f"{name}_intrinsics.json",
        }
        io.save_depth(files["depth"], getattr(scene, f"depth_{suffix}"))
        io.save_mask(files["mask"], getattr(scene, f"mask_{suffix}"))
        io.save_feature_map(files["features"], getattr(scene, f"fmap_{suffix}"))
        io.save_intrinsics(files["intrinsics"], getattr(scene, f"intrinsics_{suffix}"))
        views[name] = files
    manifest = io.ScenePairManifest(
        views["anchor"], views["query"],
        model=out / "model.json", gt_pose=out / "gt_pose.json", gt_matches=out / "gt_matches.csv",
        anchor_object_pose=out / "anchor_object_pose.json", root=out,
    )
    io.save_object_model(manifest.model, scene.model)
    io.save_pose(manifest.gt_pose, scene.gt_pose)
    io.save_supervision(manifest.gt_matches, scene.gt_matches)
    io.save_pose(manifest.anchor_object_pose, scene.pose_a, frame="object_to_A")
    io.save_manifest(out / "manifest.json", manifest)
    return manifest


def cmd_synth(args) -> int:
    spec = load_spec(args.spec, args.seed)
    scene = make_scene_pair(spec)
    write_scene(scene, _out_dir(args))
    _emit({
        "command": "synth",
        "seed": spec.seed,
        "num_gt_matches": len(scene.gt_matches),
        "mask_pixels": {"anchor": int(scene.mask_a.sum()), "query": int(scene.mask_q.sum())},
        "gt_pose": pose_to_dict(scene.gt_pose),
    }, args, "synth")
    return EXIT_OK


def _load_views(manifest):
    return io.load_view(manifest.anchor), io.load_view(manifest.query)


def cmd_match(args) -> int:
    config = _config(args)
    manifest = io.load_manifest(args.manifest)
    a, q = _load_views(manifest)
    matches = match_feature_maps(a.features, a.mask, q.features, q.mask, config.mu_t, config.max_matches,
                                 mutual=config.mutual, threads=args.threads)
    io.save_matches(_out_dir(args) / "matches.csv", matches)
    _emit({"command": "match", "num_matches": len(matches),
           "mean_distance": float(np.mean(matches.distances))}, args, "match")
    return EXIT_OK


def cmd_register(args) -> int:
    config = _config(args)
    manifest = io.load_manifest(args.manifest)
    a, q = _load_views(manifest)
    matches = io.load_matches(args.matches)
    res = register_matches(matches, a.depth, a.intrinsics, q.depth, q.intrinsics, config,
                           seed=args.seed or 0, threads=args.threads)
    est = res.estimate
    io.save_pose(_out_dir(args) / "pose.json", est.transform)
    _emit({
        "command": "register",
        "num_correspondences": est.num_correspondences,
        "num_inliers": int(len(est.inliers)),
        "inlier_ratio": est.inlier_ratio,
        "rmse": est.rmse,
        "pose": pose_to_dict(est.transform),
    }, args, "register")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = io.load_manifest(args.manifest)
    missing = [k for k in ("model", "gt_pose", "anchor_object_pose") if getattr(manifest, k) is None]
    if missing:
        raise InputFormatError(f"{args.manifest}: evaluation needs {', '.join(missing)}")
    q = io.load_view(manifest.query)
    pred = io.load_pose(args.pose)
    metrics = evaluate_relative_pose(
        io.load_object_model(manifest.model), pred, io.load_pose(manifest.gt_pose),
        io.load_pose(manifest.anchor_object_pose, frame="object_to_A"), q.intrinsics, q.depth,
    )
    _emit({"command": "evaluate", "metrics": metrics}, args, "evaluate")
    return EXIT_OK


def cmd_e2e(args) -> int:
    spec = load_spec(args.spec, args.seed)
    scene = make_scene_pair(spec)
    if args.write_scene:
        write_scene(scene, _out_dir(args) / "scene")
    report = run_scene(scene, _config(args), seed=spec.seed, threads=args.threads)
    report["command"] = "e2e"
    _emit(report, args, "e2e")
    return report.get("exit_code", EXIT_OK)


def cmd_defaults(args) -> int:
    sys.stdout.write(json.dumps(PipelineConfig().to_json_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed")
    common.add_argument("--config", type=Path, default=None, help="JSON pipeline config")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="relpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene pair")
    p.add_argument("--spec", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", parents=[common], help="nearest-neighbor matching -> matches.csv")
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("register", parents=[common], help="robust registration -> pose.json")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--matches", type=Path, required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="pose metrics against ground truth")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--pose", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("e2e", parents=[common], help="synth + match + register + evaluate in memory")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--write-scene", action="store_true", help="also write the scene files under OUT/scene")
    p.set_defaults(func=cmd_e2e)

    p = sub.add_parser("defaults", parents=[common], help="print the default pipeline config")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return InputFormatError.exit_code
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return InputFormatError.exit_code
    try:
        return args.func(args)
    except RelPoseError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
