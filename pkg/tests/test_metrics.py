import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import oracles
from relpose.errors import DimensionMismatchError, EmptyModelError, InvariantError
from relpose.geometry import CameraIntrinsics, RigidTransform, compose, project_points
from relpose.metrics import (
    THRESHOLD_FRACTIONS,
    ObjectModel,
    add_error,
    add_recall_01d,
    adds_error,
    average_recall,
    compute_diameter,
    dataset_miou,
    mask_iou,
    mask_miou,
    mspd,
    mssd,
    vsd,
    vsd_errors,
)
from relpose.synth import sample_object

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def rz(deg):
    return RigidTransform(Rotation.from_euler("z", deg, degrees=True).as_matrix(), np.zeros(3))


def pose(deg=0.0, t=(0.0, 0.0, 1.0), axis="xyz", angles=None):
    rot = Rotation.from_euler(axis, angles, degrees=True) if angles is not None else Rotation.from_euler("z", deg, degrees=True)
    return RigidTransform(rot.as_matrix(), t)


def square_model(symmetric=True, r=0.05):
    pts = np.array([[r, 0, 0], [0, r, 0], [-r, 0, 0], [0, -r, 0]], dtype=float)
    syms = [rz(a) for a in (0, 90, 180, 270)] if symmetric else None
    return ObjectModel.from_points(pts, syms)


def flat_square(side=0.1, step=0.001):
    g = np.arange(-side / 2, side / 2 + step / 2, step)
    uu, vv = np.meshgrid(g, g)
    return ObjectModel.from_points(np.column_stack([uu.ravel(), vv.ravel(), np.zeros(uu.size)]))


# -- model -------------------------------------------------------------------------

def test_model_validation():
    with pytest.raises(EmptyModelError):
        ObjectModel.from_points(np.zeros((0, 3)))
    with pytest.raises(InvariantError):
        ObjectModel(np.eye(3), 0.1)
    m = ObjectModel(np.eye(3), 2.0, [rz(90)])
    assert len(m.symmetries) == 2 and m.symmetric
    assert not ObjectModel.from_points(np.eye(3)).symmetric


def test_diameters():
    box = sample_object("box", 0.1)
    assert box.diameter == pytest.approx(0.1 * math.sqrt(3), abs=1e-12)
    sphere = sample_object("sphere-sampled", 0.08)
    assert abs(sphere.diameter - 0.08) <= 0.02 * 0.08
    flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)  # coplanar hull fallback
    assert compute_diameter(flat) == pytest.approx(math.sqrt(2))


@pytest.mark.parametrize("kind", ["cloud", "flat", "line", "single"])
def test_diameter_matches_brute_force(rng, kind):
    pts = rng.normal(size=(300, 3))
    if kind == "flat":
        pts = pts @ np.array([[1, 0, 0.5], [0, 1, -0.2], [0, 0, 0]])
    elif kind == "line":
        pts = np.outer(rng.normal(size=300), [0.3, -1.0, 2.0])
    elif kind == "single":
        pts = pts[:1]
    oracle = max((math.dist(p, q) for p in pts for q in pts), default=0.0)
    assert compute_diameter(pts) == pytest.approx(oracle, abs=1e-12)


# -- ADD / ADD-S -------------------------------------------------------------------

def test_add_zero_and_translation(rng):
    m = ObjectModel.from_points(rng.normal(size=(100, 3)))
    gt = pose(30, (0.1, 0.0, 1.0))
    assert add_error(m, gt, gt) == 0.0 and adds_error(m, gt, gt) == 0.0
    shifted = RigidTransform(gt.rotation, gt.translation + [0.01, 0, 0])
    assert add_error(m, gt, shifted) == pytest.approx(0.01, abs=1e-15)


def test_square_symmetry_absorbs_rotation():
    m = square_model()
    gt = pose(0)
    pred = compose(gt, rz(90))
    assert add_error(m, gt, pred) > 0
    assert adds_error(m, gt, pred) == pytest.approx(0.0, abs=1e-15)
    assert mssd(m, gt, pred) == pytest.approx(0.0, abs=1e-15)
    assert mspd(m, gt, pred, K) == pytest.approx(0.0, abs=1e-9)


def test_adds_is_exhaustive_min(rng):
    m = ObjectModel.from_points(rng.normal(size=(30, 3)) * 0.05)
    gt, pred = pose(10), pose(25, (0.01, 0, 1.02))
    a, b = gt.apply(m.points), pred.apply(m.points)
    oracle = np.mean([min(math.dist(p, q) for q in b) for p in a])
    assert adds_error(m, gt, pred) == pytest.approx(oracle, abs=1e-14)


def test_add_recall():
    m = ObjectModel.from_points(np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.05, 0], [0, 0, 0.02]]))
    gt = pose(0)
    assert add_recall_01d(m, gt, gt)
    off = lambda f: RigidTransform(gt.rotation, gt.translation + [f * m.diameter, 0, 0])  # noqa: E731
    assert not add_recall_01d(m, gt, off(0.2))
    # mean distance of a pure translation is its length
    assert add_error(m, gt, off(0.09999)) == pytest.approx(0.09999 * m.diameter)
    assert add_recall_01d(m, gt, off(0.09999))


# -- MSSD / MSPD -------------------------------------------------------------------

def test_mssd_without_symmetries_is_max_distance(rng):
    m = ObjectModel.from_points(rng.normal(size=(50, 3)) * 0.05)
    gt, pred = pose(0), pose(20, (0.0, 0.01, 1.0))
    assert mssd(m, gt, pred) == pytest.approx(
        np.max(np.linalg.norm(gt.apply(m.points) - pred.apply(m.points), axis=1)), abs=1e-15)
    assert mssd(m, gt, gt) == 0.0 and mspd(m, gt, gt, K) == 0.0


def test_square_stripped_symmetries_exhaustive():
    sym, plain = square_model(True), square_model(False)
    gt = pose(0)
    pred = compose(gt, rz(90))
    value = mssd(plain, gt, pred)
    assert value == pytest.approx(oracles.mssd_exhaustive(plain.points, plain.symmetries, gt, pred), abs=1e-15)
    assert value == pytest.approx(0.05 * math.sqrt(2), abs=1e-15)  # vertex to its neighbor
    assert mssd(sym, gt, pred) == pytest.approx(
        oracles.mssd_exhaustive(sym.points, sym.symmetries, gt, pred), abs=1e-15)


def test_cylinder_mssd_matches_exhaustive_oracle():
    m = sample_object("cylinder-sampled", 0.06, density=150)
    gt = pose(angles=[20, -30, 5])
    pred = compose(gt, RigidTransform(Rotation.from_euler("x", 10, degrees=True).as_matrix(), np.zeros(3)))
    assert mssd(m, gt, pred) == pytest.approx(oracles.mssd_exhaustive(m.points, m.symmetries, gt, pred), abs=1e-12)
    assert mssd(m, gt, compose(gt, rz(50))) == pytest.approx(
        oracles.mssd_exhaustive(m.points, m.symmetries, gt, compose(gt, rz(50))), abs=1e-12)


def test_mspd_depth_translation_matches_projection_oracle(rng):
    m = ObjectModel.from_points(rng.normal(size=(40, 3)) * 0.03)
    gt = pose(0, (0.0, 0.0, 1.0))
    pred = pose(0, (0.0, 0.0, 1.05))

    def px(t, p):
        x, y, z = t.rotation @ p + t.translation
        return (500 * x / z + 320, 500 * y / z + 240)

    oracle = max(math.dist(px(gt, p), px(pred, p)) for p in m.points)
    value = mspd(m, gt, pred, K)
    assert value == pytest.approx(oracle, abs=1e-9)
    assert 0 < value < 5


def test_enlarging_symmetries_never_increases_errors(rng):
    for _ in range(10):
        m = ObjectModel.from_points(rng.normal(size=(20, 3)) * 0.05)
        gt, pred = pose(angles=rng.uniform(-30, 30, 3)), pose(angles=rng.uniform(-30, 30, 3))
        small = m.with_symmetries([rz(0)])
        big = m.with_symmetries([rz(a) for a in (0, 90, 180)])
        assert mssd(big, gt, pred) <= mssd(small, gt, pred)
        assert mspd(big, gt, pred, K) <= mspd(small, gt, pred, K)


# -- VSD ---------------------------------------------------------------------------

def test_vsd_identity_and_disjoint():
    m = flat_square()
    gt = pose(0, (0.0, 0.0, 1.0))
    scene = np.zeros(K.shape)
    assert vsd(m, gt, gt, scene, K, 0.01) == 0.0
    far = pose(0, (0.3, 0.0, 1.0))
    assert vsd(m, gt, far, scene, K, 0.01) == 1.0


def test_vsd_half_overlap_within_one_boundary_column():
    m = flat_square()
    gt = pose(0, (0.0002, 0.0, 1.0))  # keep projections off half-pixel ties
    pred = pose(0, (0.0502, 0.0, 1.0))
    err = vsd(m, gt, pred, np.zeros(K.shape), K, 0.01)
    w, s = 0.1 * 500, 0.05 * 500  # footprint and shift in pixels
    bounds = [1 - (ww - s) / (ww + s) for ww in (w - 1, w + 1)]
    assert min(bounds) <= err <= max(bounds)
    assert err == pytest.approx(2 / 3, abs=0.02)


def test_vsd_occlusion_hides_pixels():
    m = flat_square()
    gt = pose(0, (0.0, 0.0, 1.0))
    pred = pose(0, (0.0, 0.0, 1.005))
    scene = np.zeros(K.shape)
    e = vsd_errors(m, gt, pred, scene, K, [0.001, 0.01])
    assert e[0] == 1.0 and e[1] == 0.0
    occluder = np.full(K.shape, 0.5)  # everything hidden behind a wall at 0.5 m
    with pytest.raises(DimensionMismatchError):
        vsd(m, gt, pred, np.zeros((2, 2)), K, 0.01)
    assert vsd(m, gt, pred, occluder, K, 0.01) == 1.0


# -- AR ----------------------------------------------------------------------------

def test_ar_perfect_and_far():
    m = sample_object("box", 0.1, density=300)
    gt = pose(angles=[10, 20, 30], t=(0.0, 0.0, 0.6))
    rep = average_recall(m, gt, gt, K, np.zeros(K.shape))
    assert rep.ar == 1.0 and rep.add_recall_flag and rep.mssd_err == 0.0
    far = RigidTransform(gt.rotation, gt.translation + [10 * m.diameter, 0, 0])
    assert average_recall(m, gt, far, K, np.zeros(K.shape)).ar == 0.0


def test_ar_compositional_oracle():
    m = sample_object("composite", 0.1, density=300)
    gt = pose(angles=[10, 20, 30], t=(0.0, 0.0, 0.6))
    pred = RigidTransform(Rotation.from_euler("y", 4, degrees=True).as_matrix() @ gt.rotation,
                          gt.translation + [0.006, -0.004, 0.01])
    scene = np.zeros(K.shape)
    rep = average_recall(m, gt, pred, K, scene)
    d = m.diameter
    r_mssd = np.mean([mssd(m, gt, pred) < f * d for f in THRESHOLD_FRACTIONS])
    r_mspd = np.mean([mspd(m, gt, pred, K) < f * K.width for f in THRESHOLD_FRACTIONS])
    r_vsd = np.mean([vsd(m, gt, pred, scene, K, f * d) < th
                     for f in THRESHOLD_FRACTIONS for th in THRESHOLD_FRACTIONS])
    assert 0 < rep.ar < 1
    assert rep.ar == pytest.approx((r_mssd + r_mspd + r_vsd) / 3, abs=1e-15)
    assert rep.as_dict()["metadata"]["add_variant"] == "add"


# -- masks -------------------------------------------------------------------------

def test_mask_iou_examples():
    a = np.zeros((10, 10), bool)
    a[2:6, 2:6] = True
    assert mask_iou(a, a) == 1.0
    b = np.zeros_like(a)
    b[7:9, 7:9] = True
    assert mask_iou(a, b) == 0.0
    c = np.zeros((10, 20), bool)
    d = np.zeros_like(c)
    c[0:4, 0:8] = True
    d[0:4, 4:12] = True
    assert mask_iou(c, d) == pytest.approx(1 / 3)
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert mask_miou(a, a, a, b) == 0.5
    assert dataset_miou([(a, a, a, a), (a, b, a, b)]) == 0.5
    with pytest.raises(DimensionMismatchError):
        mask_iou(a, c)
