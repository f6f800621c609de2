"""Symmetry-aware pose errors, recall aggregation and mask IoU.

Poses map model-frame points into the camera frame. Distances are in meters,
projection distances in pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import cdist

from .errors import DimensionMismatchError, EmptyModelError, EmptyRenderError, InvariantError
from .geometry import CameraIntrinsics, RigidTransform, compose, project_points
from .render import median_spacing, splat_closed, splat_radii

THRESHOLD_FRACTIONS = np.arange(1, 11) * 0.05
VSD_DELTA = 0.015


def _max_pairwise_distance(points: np.ndarray, chunk: int = 1024) -> float:
    best = 0.0
    for lo in range(0, len(points), chunk):
        best = max(best, float(cdist(points[lo : lo + chunk], points, "sqeuclidean").max()))
    return float(np.sqrt(best))


def _extreme_candidates(points: np.ndarray) -> np.ndarray:
    """Convex-hull vertices, computed in the affine span so flat sets work too."""
    centered = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * s[0])) if s[0] > 0 else 0
    if rank == 0:
        return points[:1]
    proj = centered @ vt[:rank].T
    if rank == 1:
        return points[[np.argmin(proj[:, 0]), np.argmax(proj[:, 0])]]
    try:
        return points[ConvexHull(proj).vertices]
    except QhullError:
        return points


def compute_diameter(points) -> float:
    """Largest distance between two points (extreme pairs lie on the convex hull)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 2:
        return 0.0
    return _max_pairwise_distance(_extreme_candidates(points))


@dataclass(eq=False)
class ObjectModel:
    """Model-frame point set with its diameter and discrete symmetry group.

    Continuous symmetries must be discretized by the caller (e.g. 36 rotations
    about a cylinder axis).
    """

    points: np.ndarray
    diameter: float
    symmetries: list = field(default_factory=lambda: [RigidTransform.identity()])

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyModelError("object model has no points")
        if not np.all(np.isfinite(self.points)):
            raise InvariantError("object model has non-finite points")
        self.diameter = float(self.diameter)
        if not self.diameter > 0:
            raise InvariantError(f"diameter must be positive, got {self.diameter}")
        # 2 * max radius bounds the diameter from above, so the exact check is rarely needed
        radius = float(np.linalg.norm(self.points - self.points.mean(axis=0), axis=1).max())
        if self.diameter < 2 * radius - 1e-6 and self.diameter < compute_diameter(self.points) - 1e-6:
            raise InvariantError("diameter is smaller than the largest point distance")
        self.symmetries = list(self.symmetries)
        if not any(_is_identity(s) for s in self.symmetries):
            self.symmetries.insert(0, RigidTransform.identity())

    @classmethod
    def from_points(cls, points, symmetries=None) -> ObjectModel:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        syms = symmetries if symmetries is not None else [RigidTransform.identity()]
        return cls(points, compute_diameter(points), syms)

    @property
    def symmetric(self) -> bool:
        return any(not _is_identity(s) for s in self.symmetries)

    def with_symmetries(self, symmetries) -> ObjectModel:
        return ObjectModel(self.points, self.diameter, symmetries)


def _is_identity(t: RigidTransform, tol: float = 1e-12) -> bool:
    return bool(np.abs(t.rotation - np.eye(3)).max() <= tol and np.abs(t.translation).max() <= tol)


def add_error(model: ObjectModel, gt: RigidTransform, pred: RigidTransform) -> float:
    """Mean distance between corresponding model points under the two poses."""
    return float(np.mean(np.linalg.norm(gt.apply(model.points) - pred.apply(model.points), axis=1)))


def adds_error(model: ObjectModel, gt: RigidTransform, pred: RigidTransform) -> float:
    """Mean distance from each ground-truth-posed point to the closest predicted-posed point."""
    d, _ = cKDTree(pred.apply(model.points)).query(gt.apply(model.points), k=1)
    return float(np.mean(d))


def add_recall_01d(model: ObjectModel, gt: RigidTransform, pred: RigidTransform) -> bool:
    """ADD(S) below 10% of the diameter; ADD-S is used for symmetric models."""
    err = adds_error(model, gt, pred) if model.symmetric else add_error(model, gt, pred)
    return bool(err < 0.1 * model.diameter)


def mssd(model: ObjectModel, gt: RigidTransform, pred: RigidTransform) -> float:
    pred_pts = pred.apply(model.points)
    return min(
        float(np.max(np.linalg.norm(compose(gt, s).apply(model.points) - pred_pts, axis=1)))
        for s in model.symmetries
    )


def mspd(model: ObjectModel, gt: RigidTransform, pred: RigidTransform, intrinsics: CameraIntrinsics) -> float:
    pred_px = project_points(intrinsics, pred.apply(model.points))[:, :2]
    return min(
        float(np.max(np.linalg.norm(
            project_points(intrinsics, compose(gt, s).apply(model.points))[:, :2] - pred_px, axis=1)))
        for s in model.symmetries
    )


def render_model(model: ObjectModel, pose: RigidTransform, intrinsics: CameraIntrinsics, spacing=None):
    """Depth render of the posed model with distance-adaptive splat radii."""
    pts = pose.apply(model.points)
    if spacing is None:
        spacing = median_spacing(model.points)
    radii = splat_radii(intrinsics, pts[:, 2], spacing)
    depth, _ = splat_closed(pts, intrinsics, radii, 0.1 * model.diameter)
    return depth


def _visibility(rendered, scene, delta):
    return (rendered > 0) & ((rendered <= scene + delta) | (scene == 0))


def vsd_errors(model, gt, pred, scene_depth, intrinsics, tolerances, delta=VSD_DELTA, spacing=None) -> list:
    """VSD error for each misalignment tolerance, from a single pair of renders.

    A pixel of a render is visible when its depth does not exceed the scene
    depth by more than ``delta`` (pixels with no scene depth count as
    visible). The error is the fraction of the union of both visibility masks
    not covered by the intersection with depth difference within tolerance.
    """
    scene = np.asarray(scene_depth, dtype=float)
    if scene.shape != intrinsics.shape:
        raise DimensionMismatchError("<scene depth>", "shape", f"{scene.shape} vs {intrinsics.shape}")
    d_gt = render_model(model, gt, intrinsics, spacing)
    if not np.any(d_gt > 0):
        raise EmptyRenderError("ground-truth render is empty (object outside the frustum)")
    d_pred = render_model(model, pred, intrinsics, spacing)
    vis_gt = _visibility(d_gt, scene, delta)
    vis_pred = _visibility(d_pred, scene, delta)
    union = vis_gt | vis_pred
    inter = vis_gt & vis_pred
    n_union = int(union.sum())
    if n_union == 0:
        return [1.0] * len(tolerances)
    diff = np.abs(d_gt - d_pred)[inter]
    return [float(1.0 - np.sum(diff <= tol) / n_union) for tol in tolerances]


def vsd(model, gt, pred, scene_depth, intrinsics, misalignment_tolerance, delta=VSD_DELTA, spacing=None) -> float:
    return vsd_errors(model, gt, pred, scene_depth, intrinsics, [misalignment_tolerance], delta, spacing)[0]


@dataclass
class MetricReport:
    add_err: float
    adds_err: float
    add_recall_flag: bool
    vsd_recall: float
    mssd_recall: float
    mspd_recall: float
    ar: float
    mssd_err: float
    mspd_err: float
    vsd_errs: list
    metadata: dict

    def as_dict(self) -> dict:
        return asdict(self)


def average_recall(
    model: ObjectModel,
    gt: RigidTransform,
    pred: RigidTransform,
    intrinsics: CameraIntrinsics,
    scene_depth,
    delta: float = VSD_DELTA,
) -> MetricReport:
    """AR = mean of the VSD, MSSD and MSPD recalls over 5%..50% threshold grids.

    MSSD and VSD tolerances scale with the diameter, MSPD thresholds with the
    image width. VSD recall averages over the full (tolerance, error
    threshold) grid.
    """
    d = model.diameter
    thr = THRESHOLD_FRACTIONS
    e_mssd = mssd(model, gt, pred)
    e_mspd = mspd(model, gt, pred, intrinsics)
    e_vsd = vsd_errors(model, gt, pred, scene_depth, intrinsics, thr * d, delta)

    r_mssd = float(np.mean(e_mssd < thr * d))
    r_mspd = float(np.mean(e_mspd < thr * intrinsics.width))
    r_vsd = float(np.mean(np.asarray(e_vsd)[:, None] < thr[None, :]))
    add = add_error(model, gt, pred)
    adds = adds_error(model, gt, pred)
    chosen = adds if model.symmetric else add
    return MetricReport(
        add_err=add,
        adds_err=adds,
        add_recall_flag=bool(chosen < 0.1 * d),
        vsd_recall=r_vsd,
        mssd_recall=r_mssd,
        mspd_recall=r_mspd,
        ar=(r_vsd + r_mssd + r_mspd) / 3.0,
        mssd_err=e_mssd,
        mspd_err=e_mspd,
        vsd_errs=list(e_vsd),
        metadata={
            "threshold_fractions": [round(float(t), 2) for t in thr],
            "mspd_threshold_basis": "image_width",
            "vsd_grid": "misalignment tolerance x error threshold, 10 x 10",
            "vsd_visibility_delta": delta,
            "add_variant": "adds" if model.symmetric else "add",
        },
    )


def mask_iou(pred, gt) -> float:
    """IoU of two binary masks; two empty masks count as a perfect match."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise DimensionMismatchError("<mask>", "shape", f"{p.shape} vs {g.shape}")
    union = np.sum(p | g)
    if union == 0:
        return 1.0
    return float(np.sum(p & g) / union)


def mask_miou(pred_a, gt_a, pred_q, gt_q) -> float:
    return (mask_iou(pred_a, gt_a) + mask_iou(pred_q, gt_q)) / 2.0


def dataset_miou(pairs) -> float:
    """Mean over image pairs of :func:`mask_miou`; ``pairs`` yields 4-tuples of masks."""
    values = [mask_miou(*p) for p in pairs]
    return float(np.mean(values)) if values else float("nan")
