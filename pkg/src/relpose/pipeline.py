"""Match -> lift -> register -> evaluate, shared by the CLI and the Monte Carlo tests."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .errors import InputFormatError, RelPoseError
from .geometry import RigidTransform, compose, rotation_error, translation_error
from .losses import LossParams, MatchSupervision, total_loss
from .matching import lift_matches_to_3d, match_feature_maps
from .metrics import ObjectModel, average_recall, mask_miou
from .registration import PoseEstimate, RegistrationParams, register

# JSON config key -> attribute
CONFIG_KEYS = {
    "mu_P": "mu_p",
    "mu_N": "mu_n",
    "tau": "tau",
    "mu_T": "mu_t",
    "C": "max_matches",
    "lambda_P": "lambda_p",
    "lambda_N": "lambda_n",
    "beta": "beta",
    "inlier_threshold": "inlier_threshold",
    "max_seeds": "max_seeds",
    "local_rounds": "local_rounds",
    "mutual": "mutual",
    "registration_method": "registration_method",
    "negative_pool": "negative_pool",
}


@dataclass(frozen=True)
class PipelineConfig:
    mu_p: float = 0.2
    mu_n: float = 0.9
    tau: float = 20.0
    mu_t: float = 0.25
    max_matches: int = 2000
    lambda_p: float = 0.5
    lambda_n: float = 0.5
    beta: float = 0.010
    inlier_threshold: float = 0.010
    max_seeds: int = 32
    local_rounds: int = 3
    mutual: bool = False
    registration_method: str = "spatial"
    negative_pool: str = "matched"

    def __post_init__(self):
        # surface bad values as input errors now rather than mid-pipeline
        try:
            self.loss_params()
            self.registration_params(0)
        except ValueError as exc:
            raise InputFormatError(f"invalid config: {exc}") from exc
        if self.negative_pool not in ("matched", "all"):
            raise InputFormatError(f"invalid config: negative_pool must be 'matched' or 'all', got {self.negative_pool!r}")
        if not 0 <= self.mu_t <= 1 or self.max_matches < 1:
            raise InputFormatError("invalid config: need 0 <= mu_T <= 1 and C >= 1")

    def loss_params(self) -> LossParams:
        return LossParams(self.mu_p, self.mu_n, self.tau, self.lambda_p, self.lambda_n, self.max_matches)

    def registration_params(self, seed: int) -> RegistrationParams:
        return RegistrationParams(self.beta, self.inlier_threshold, self.max_seeds, self.local_rounds,
                                  seed=seed, method=self.registration_method)

    def to_json_dict(self) -> dict:
        return {key: getattr(self, attr) for key, attr in CONFIG_KEYS.items()}

    @classmethod
    def from_json_dict(cls, data: dict) -> PipelineConfig:
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise InputFormatError(f"unknown config keys: {sorted(unknown)}")
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            attr = CONFIG_KEYS[key]
            expected = {"float": (int, float), "int": int, "bool": bool, "str": str}[types[attr]]
            if isinstance(value, bool) and types[attr] != "bool" or not isinstance(value, expected):
                raise InputFormatError(f"config key {key!r} has invalid value {value!r}")
            kwargs[attr] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputFormatError(f"{path}: cannot read config: {exc}") from exc
        if not isinstance(data, dict):
            raise InputFormatError(f"{path}: config must be a JSON object")
        return cls.from_json_dict(data)


@dataclass
class PoseResult:
    matches: object
    estimate: PoseEstimate
    src: np.ndarray
    dst: np.ndarray


def estimate_relative_pose(fmap_a, mask_a, depth_a, intrinsics_a, fmap_q, mask_q, depth_q, intrinsics_q,
                           config: PipelineConfig = PipelineConfig(), seed: int = 0, threads: int = 1) -> PoseResult:
    """Masked NN matching, backprojection and robust registration (anchor -> query)."""
    matches = match_feature_maps(fmap_a, mask_a, fmap_q, mask_q, config.mu_t, config.max_matches,
                                 mutual=config.mutual, threads=threads)
    return register_matches(matches, depth_a, intrinsics_a, depth_q, intrinsics_q, config, seed, threads)


def register_matches(matches, depth_a, intrinsics_a, depth_q, intrinsics_q,
                     config: PipelineConfig = PipelineConfig(), seed: int = 0, threads: int = 1) -> PoseResult:
    src, dst = lift_matches_to_3d(matches, depth_a, depth_q, intrinsics_a, intrinsics_q)
    est = register(src, dst, config.registration_params(seed), threads=threads)
    return PoseResult(matches, est, src, dst)


def relative_pose_errors(pred: RigidTransform, gt: RigidTransform, pose_a: RigidTransform) -> dict:
    """Rotation error in degrees and translation error of the object center in the query frame."""
    center = pose_a.translation
    return {
        "rotation_deg": float(np.degrees(rotation_error(pred.rotation, gt.rotation))),
        "translation_m": translation_error(pred.apply(center), gt.apply(center)),
    }


def evaluate_relative_pose(model: ObjectModel, pred: RigidTransform, gt: RigidTransform, pose_a: RigidTransform,
                           intrinsics_q, depth_q) -> dict:
    """Object-pose metrics in the query view for a predicted anchor->query transform."""
    report = average_recall(model, compose(gt, pose_a), compose(pred, pose_a), intrinsics_q, depth_q)
    out = report.as_dict()
    out["pose_error"] = relative_pose_errors(pred, gt, pose_a)
    return out


def supervision_losses(fmap_a, fmap_q, mask_a, mask_q, gt_mask_a, gt_mask_q, sup: MatchSupervision,
                       config: PipelineConfig, seed: int = 0) -> dict:
    rep = total_loss(fmap_a, fmap_q, mask_a.astype(float), mask_q.astype(float), gt_mask_a, gt_mask_q, sup,
                     config.loss_params(), np.random.default_rng(seed), pool=config.negative_pool)
    return {**rep.values(), "num_pairs": rep.num_pairs}


def pose_to_dict(t: RigidTransform) -> dict:
    return {"rotation": t.rotation.ravel().tolist(), "translation": t.translation.tolist()}


def run_scene(scene, config: PipelineConfig = PipelineConfig(), seed: int = 0, threads: int = 1,
              with_losses: bool = True) -> dict:
    """Full evaluation of one synthetic :class:`ScenePair`; failures are reported, not raised."""
    report = {"status": "ok", "config": config.to_json_dict(), "seed": seed}
    if with_losses and scene.gt_matches is not None:
        report["losses"] = supervision_losses(scene.fmap_a, scene.fmap_q, scene.mask_a, scene.mask_q,
                                              scene.mask_a, scene.mask_q, scene.gt_matches, config, seed)
    report["miou"] = mask_miou(scene.mask_a, scene.mask_a, scene.mask_q, scene.mask_q)
    try:
        res = estimate_relative_pose(scene.fmap_a, scene.mask_a, scene.depth_a, scene.intrinsics_a,
                                     scene.fmap_q, scene.mask_q, scene.depth_q, scene.intrinsics_q,
                                     config, seed, threads)
    except RelPoseError as exc:
        report["status"] = type(exc).__name__
        report["error"] = str(exc)
        report["exit_code"] = exc.exit_code
        return report
    est = res.estimate
    report["registration"] = {
        "num_matches": len(res.matches),
        "num_correspondences": est.num_correspondences,
        "num_inliers": int(len(est.inliers)),
        "inlier_ratio": est.inlier_ratio,
        "rmse": est.rmse,
    }
    report["pose"] = pose_to_dict(est.transform)
    report["metrics"] = evaluate_relative_pose(scene.model, est.transform, scene.gt_pose, scene.pose_a,
                                               scene.intrinsics_q, scene.depth_q)
    return report


def success(report: dict, max_rot_deg: float = 2.0, max_trans_m: float = 0.005) -> bool:
    if report.get("status") != "ok":
        return False
    err = report["metrics"]["pose_error"]
    return err["rotation_deg"] < max_rot_deg and err["translation_m"] < max_trans_m
