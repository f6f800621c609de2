"""Synthetic anchor/query scene pairs with complete ground truth.

Each scene renders a sampled object (plus optional distractors behind it)
into two views by z-buffered point splatting. Descriptors live on the model
points, so matching quality is controlled by explicit noise and outlier
knobs, and ground-truth matches are the model points that win the z-buffer
in both views.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyRenderError, NoCovisiblePointsError
from .geometry import CameraIntrinsics, RigidTransform, compose, invert, rotation_error
from .losses import MatchSupervision
from .metrics import ObjectModel
from .render import splat_closed

log = logging.getLogger(__name__)

SHAPES = ("box", "cylinder-sampled", "sphere-sampled", "composite")
SYMMETRY_STEPS = 36


@dataclass(frozen=True)
class SyntheticSceneSpec:
    object_shape: str = "box"
    object_scale: float = 0.1
    pose_a: RigidTransform | None = None
    pose_q: RigidTransform | None = None
    descriptor_dim: int = 32
    descriptor_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    depth_noise_sigma: float = 0.0
    distractor_count: int = 0
    seed: int = 0
    image_size: int = 192
    focal: float = 320.0
    object_distance: float = 0.5
    max_relative_angle_deg: float = 45.0
    density: float = 900.0  # surface samples per meter
    max_matches: int = 2000

    def __post_init__(self):
        if self.object_shape not in SHAPES:
            raise ValueError(f"unknown shape {self.object_shape!r}, expected one of {SHAPES}")
        if not self.object_scale > 0:
            raise ValueError("object_scale must be positive")
        if not 0 <= self.outlier_fraction <= 1:
            raise ValueError("outlier_fraction must be in [0, 1]")
        if self.descriptor_dim < 1 or self.descriptor_noise_sigma < 0 or self.depth_noise_sigma < 0:
            raise ValueError("invalid descriptor or noise settings")


@dataclass
class ScenePair:
    depth_a: np.ndarray
    depth_q: np.ndarray
    mask_a: np.ndarray
    mask_q: np.ndarray
    fmap_a: np.ndarray
    fmap_q: np.ndarray
    intrinsics_a: CameraIntrinsics
    intrinsics_q: CameraIntrinsics
    gt_pose: RigidTransform  # anchor camera frame -> query camera frame
    gt_matches: MatchSupervision
    model: ObjectModel
    pose_a: RigidTransform  # object -> anchor camera
    pose_q: RigidTransform  # object -> query camera
    index_a: np.ndarray = field(repr=False, default=None)
    index_q: np.ndarray = field(repr=False, default=None)


def _grid(n):
    return np.linspace(-0.5, 0.5, n)


def _cube_rotations():
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            m[range(3), perm] = signs
            if np.linalg.det(m) > 0:
                mats.append(m)
    return [RigidTransform(m, np.zeros(3)) for m in mats]


def _axial_symmetries(steps):
    """``steps`` rotations about z, each optionally combined with a flip about x."""
    flip = np.diag([1.0, -1.0, -1.0])
    out = []
    for f in (np.eye(3), flip):
        for k in range(steps):
            rz = Rotation.from_euler("z", 2 * np.pi * k / steps).as_matrix()
            out.append(RigidTransform(rz @ f, np.zeros(3)))
    return out


def _ring_count(radius, density, steps):
    return steps * max(1, int(round(2 * np.pi * radius * density / steps)))


def _ring(radius, z, n):
    th = 2 * np.pi * np.arange(n) / n
    return np.column_stack([radius * np.cos(th), radius * np.sin(th), np.full(n, z)])


def _box_points(size, density):
    size = np.asarray(size, dtype=float)
    n = np.maximum(2, np.rint(size * density).astype(int) + 1)
    faces = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        ga, gb = np.meshgrid(_grid(n[a]) * size[a], _grid(n[b]) * size[b], indexing="ij")
        for side in (-0.5, 0.5):
            f = np.empty((ga.size, 3))
            f[:, a], f[:, b], f[:, axis] = ga.ravel(), gb.ravel(), side * size[axis]
            faces.append(f)
    return np.unique(np.concatenate(faces), axis=0)


def _cylinder_points(radius, height, density, steps, center=(0.0, 0.0, 0.0)):
    pts = []
    n_th = _ring_count(radius, density, steps)
    for z in _grid(max(2, int(round(height * density)) + 1)) * height:
        pts.append(_ring(radius, z, n_th))
    n_r = max(1, int(round(radius * density)))
    for rho in radius * np.arange(1, n_r) / n_r:
        for z in (-height / 2, height / 2):
            pts.append(_ring(rho, z, _ring_count(rho, density, steps)))
    pts.append(np.array([[0.0, 0.0, -height / 2], [0.0, 0.0, height / 2]]))
    return np.concatenate(pts) + np.asarray(center)


def _sphere_points(radius, density, steps):
    n_lat = max(2, int(round(np.pi * radius * density)))
    pts = [np.array([[0.0, 0.0, radius], [0.0, 0.0, -radius]])]
    for phi in np.pi * np.arange(1, n_lat) / n_lat:
        rho = radius * np.sin(phi)
        pts.append(_ring(rho, radius * np.cos(phi), _ring_count(rho, density, steps)))
    return np.concatenate(pts)


def sample_object(shape: str = "box", scale: float = 0.1, density: float = 900.0, seed: int = 0,
                  symmetry_steps: int = SYMMETRY_STEPS) -> ObjectModel:
    """Surface point model centered at the origin.

    ``density`` is the number of samples per meter along the surface. Box,
    cylinder and sphere sample sets are exactly invariant under their listed
    symmetries: the full 24-element rotation group of the cube, and
    ``symmetry_steps`` rotations about z (with and without a flip) for the
    cylinder and sphere. ``composite`` (a slab with an off-center knob) has
    no symmetry. ``seed`` is accepted for interface stability; sampling is
    deterministic.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    if shape == "box":
        pts = _box_points([scale] * 3, density)
        syms = _cube_rotations()
    elif shape == "cylinder-sampled":
        pts = _cylinder_points(scale / 2, scale, density, symmetry_steps)
        syms = _axial_symmetries(symmetry_steps)
    elif shape == "sphere-sampled":
        pts = _sphere_points(scale / 2, density, symmetry_steps)
        syms = _axial_symmetries(symmetry_steps)
    elif shape == "composite":
        slab = _box_points([scale, 0.6 * scale, 0.4 * scale], density)
        knob = _cylinder_points(0.12 * scale, 0.3 * scale, density, 12, center=(0.25 * scale, 0.1 * scale, 0.35 * scale))
        pts = np.concatenate([slab, knob])
        pts -= (pts.max(axis=0) + pts.min(axis=0)) / 2
        syms = [RigidTransform.identity()]
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return ObjectModel.from_points(pts, syms)


def default_intrinsics(spec: SyntheticSceneSpec) -> CameraIntrinsics:
    c = (spec.image_size - 1) / 2.0
    return CameraIntrinsics(spec.focal, spec.focal, c, c, spec.image_size, spec.image_size)


def sample_poses(spec: SyntheticSceneSpec, rng: np.random.Generator):
    """Anchor pose with a uniform SO(3) rotation; query pose rotated from it by a bounded angle."""
    rot_a = Rotation.random(random_state=rng)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, spec.max_relative_angle_deg))
    rot_q = Rotation.from_rotvec(axis * angle) * rot_a
    jitter = 0.05 * spec.object_distance

    def position():
        return np.array([rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter),
                         spec.object_distance * rng.uniform(0.9, 1.1)])

    pose_a = RigidTransform(rot_a.as_matrix(), position())
    pose_q = RigidTransform(rot_q.as_matrix(), position())
    return pose_a, pose_q


def _distractor_points(model, pose, spec, rng):
    """Boxes placed behind the object, laterally offset so they peek out beside it."""
    z_far = pose.apply(model.points)[:, 2].max()
    out = []
    for _ in range(spec.distractor_count):
        size = spec.object_scale * rng.uniform(0.6, 1.2, size=3)
        pts = _box_points(size, spec.density)
        rot = Rotation.random(random_state=rng).as_matrix()
        pts = pts @ rot.T
        side = rng.choice([-1.0, 1.0])
        offset = np.array([side * rng.uniform(0.6, 1.0) * spec.object_scale,
                           rng.uniform(-0.5, 0.5) * spec.object_scale, 0.0])
        pts = pts + pose.translation * [1, 1, 0] + offset
        pts[:, 2] += z_far - pts[:, 2].min() + rng.uniform(0.05, 0.15)
        out.append(pts)
    return np.concatenate(out) if out else np.zeros((0, 3))


def render_depth(model: ObjectModel, pose: RigidTransform, intrinsics: CameraIntrinsics,
                 splat_radius: int = 1, extra_points=None):
    """Render the posed model (and optional extra geometry) by point splatting.

    Aliasing holes are closed (see :func:`~relpose.render.splat_closed`) with
    a tolerance of 10% of the diameter, separately for the model and the
    extra geometry.

    Returns ``(depth, mask, index)`` where ``mask`` marks pixels won by the
    model and ``index`` holds the winning model point (-1 elsewhere).
    """
    tol = 0.1 * model.diameter
    depth, index = splat_closed(pose.apply(model.points), intrinsics, splat_radius, tol)
    mask = index >= 0
    if extra_points is not None and len(extra_points):
        # close holes per surface, so clutter behind the silhouette cannot grow the mask
        d_x, i_x = splat_closed(extra_points, intrinsics, splat_radius, tol)
        use = (d_x > 0) & (~mask | (d_x < depth))
        depth[use] = d_x[use]
        index[use] = i_x[use] + len(model.points)
        mask &= ~use
    if not mask.any():
        raise EmptyRenderError("object is outside the view frustum")
    index = np.where(mask, index, -1)
    return depth, mask, index


def generate_gt_matches(index_a, index_q, max_matches=None, rng=None) -> MatchSupervision:
    """Pixel pairs of the model points that win the z-buffer in both views."""
    n = max(index_a.max(), index_q.max()) + 1
    pix_a = np.full((n, 2), -1, dtype=np.int64)
    pix_q = np.full((n, 2), -1, dtype=np.int64)
    # reversed assignment keeps the first (row-major) pixel a point wins
    for index, pix in ((index_a, pix_a), (index_q, pix_q)):
        v, u = np.nonzero(index >= 0)
        ids = index[v, u]
        pix[ids[::-1]] = np.column_stack([u, v])[::-1]
    both = np.nonzero((pix_a[:, 0] >= 0) & (pix_q[:, 0] >= 0))[0]
    if len(both) == 0:
        raise NoCovisiblePointsError("no model point is visible in both views")
    ca, cq = pix_a[both], pix_q[both]
    order = np.lexsort((ca[:, 0], ca[:, 1]))
    sup = MatchSupervision(ca[order], cq[order])
    if max_matches is not None and len(sup) > max_matches:
        sup = sup.subsample(max_matches, rng if rng is not None else np.random.default_rng(0))
    return sup


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_feature_maps(index_a, index_q, num_points, descriptor_dim=32, noise_sigma=0.0,
                       outlier_fraction=0.0, seed=0):
    """Per-pixel descriptors for both views.

    Object pixels carry their model point's unit descriptor plus isotropic
    Gaussian noise (renormalized); ``outlier_fraction`` of them get fresh random
    descriptors, as do all background pixels. Returned as float32.
    """
    rng = np.random.default_rng(seed)
    point_desc = _unit(rng.normal(size=(num_points, descriptor_dim)))
    maps = []
    for index in (index_a, index_q):
        h, w = index.shape
        fmap = _unit(rng.normal(size=(h, w, descriptor_dim)))
        v, u = np.nonzero(index >= 0)
        desc = point_desc[index[v, u]]
        if noise_sigma > 0:
            desc = _unit(desc + noise_sigma * rng.normal(size=desc.shape))
        n_out = int(round(outlier_fraction * len(v)))
        if n_out:
            pick = rng.choice(len(v), size=n_out, replace=False)
            desc[pick] = _unit(rng.normal(size=(n_out, descriptor_dim)))
        fmap[v, u] = desc
        maps.append(fmap.astype(np.float32))
    return maps[0], maps[1]


def make_scene_pair(spec: SyntheticSceneSpec) -> ScenePair:
    """Generate a full scene pair; identical specs give bit-identical pairs."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(5)]
    pose_rng, distractor_rng, desc_seed_rng, noise_rng, match_rng = streams
    model = sample_object(spec.object_shape, spec.object_scale, spec.density)
    # always draw, so fixing one pose does not shift the other streams
    pose_a, pose_q = sample_poses(spec, pose_rng)
    if spec.pose_a is not None:
        pose_a = spec.pose_a
    if spec.pose_q is not None:
        pose_q = spec.pose_q
    log.debug("relative rotation %.2f deg",
              np.degrees(rotation_error(pose_a.rotation, pose_q.rotation)))
    k = default_intrinsics(spec)

    depths, masks, indices = [], [], []
    for pose in (pose_a, pose_q):
        extra = _distractor_points(model, pose, spec, distractor_rng)
        depth, mask, index = render_depth(model, pose, k, 1, extra)
        if spec.depth_noise_sigma > 0:
            valid = depth > 0
            noisy = depth[valid] + spec.depth_noise_sigma * noise_rng.normal(size=int(valid.sum()))
            depth[valid] = np.maximum(noisy, 1e-4)
        depths.append(depth)
        masks.append(mask)
        indices.append(index)

    gt_matches = generate_gt_matches(indices[0], indices[1], spec.max_matches, match_rng)
    fa, fq = synth_feature_maps(indices[0], indices[1], len(model.points), spec.descriptor_dim,
                                spec.descriptor_noise_sigma, spec.outlier_fraction,
                                int(desc_seed_rng.integers(2**63)))
    return ScenePair(
        depth_a=depths[0], depth_q=depths[1], mask_a=masks[0], mask_q=masks[1],
        fmap_a=fa, fmap_q=fq, intrinsics_a=k, intrinsics_q=k,
        gt_pose=compose(pose_q, invert(pose_a)), gt_matches=gt_matches, model=model,
        pose_a=pose_a, pose_q=pose_q, index_a=indices[0], index_q=indices[1],
    )


def with_seed(spec: SyntheticSceneSpec, seed: int) -> SyntheticSceneSpec:
    return replace(spec, seed=seed)
