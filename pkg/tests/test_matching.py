import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relpose.errors import (
    DimensionMismatchError,
    EmptyMaskError,
    InvalidMatchDepthError,
    InvariantError,
    NoMatchesError,
    OutOfBoundsError,
    ZeroVectorError,
)
from relpose.geometry import CameraIntrinsics
from relpose.matching import (
    FeatureList,
    MatchSet,
    cosine_distance,
    extract_masked_features,
    lift_matches_to_3d,
    match_feature_maps,
    match_nearest_neighbor,
    pairwise_cosine_distance,
)

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def brute_force_nn(fa, fq, mu_t, cap):
    """O(N*M) scan with explicit per-pair cosine evaluation."""
    pairs = []
    for i, a in enumerate(fa.vectors):
        best_j, best_d = -1, np.inf
        for j, q in enumerate(fq.vectors):
            d = (1 - np.dot(a, q) / (np.linalg.norm(a) * np.linalg.norm(q))) / 2
            if d < best_d - 1e-15:
                best_j, best_d = j, d
        if best_d <= mu_t:
            pairs.append((best_d, i, best_j))
    pairs.sort()
    pairs = sorted(pairs[:cap], key=lambda p: p[1])
    return [p[1] for p in pairs], [p[2] for p in pairs], [p[0] for p in pairs]


def _features(rng, n, dim=8):
    coords = np.column_stack([np.arange(n) % 20, np.arange(n) // 20])
    return FeatureList(coords, rng.normal(size=(n, dim)))


# -- distance ----------------------------------------------------------------------

def test_cosine_distance_examples():
    assert cosine_distance([0.3, -2.0, 1.0], [0.3, -2.0, 1.0]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([0.3, -2.0, 1.0], [-0.3, 2.0, -1.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_distance([1, 0], [1, 1]) == pytest.approx((1 - np.sqrt(2) / 2) / 2, abs=1e-15)
    assert cosine_distance([1, 0], [1, 1]) == pytest.approx(0.14645, abs=1e-5)


def test_cosine_distance_zero_vector():
    with pytest.raises(ZeroVectorError):
        cosine_distance([0, 0], [1, 0])


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.floats(0.01, 100))
def test_cosine_distance_properties(a, b, s):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    d = cosine_distance(a, b)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(cosine_distance(b, a), abs=1e-12)
    assert d == pytest.approx(cosine_distance(np.multiply(a, s), b), abs=1e-12)


def test_pairwise_distance_matches_scalar(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(4, 5))
    d = pairwise_cosine_distance(a, b)
    assert d.shape == (7, 4)
    for i in range(7):
        for j in range(4):
            assert d[i, j] == pytest.approx(cosine_distance(a[i], b[j]), abs=1e-14)


# -- extraction --------------------------------------------------------------------

def test_extract_empty_mask():
    with pytest.raises(EmptyMaskError):
        extract_masked_features(np.ones((4, 4, 2)), np.zeros((4, 4), bool))


def test_extract_row_major_order():
    fmap = np.arange(8, dtype=float).reshape(2, 2, 2)
    fl = extract_masked_features(fmap, np.ones((2, 2), bool))
    assert fl.coords.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]
    assert fl.vectors.tolist() == [[0, 1], [2, 3], [4, 5], [6, 7]]


def test_extract_count_matches_popcount(rng):
    for _ in range(20):
        mask = rng.random((16, 16)) < 0.4
        mask[0, 0] = True
        fl = extract_masked_features(rng.normal(size=(16, 16, 3)), mask)
        assert len(fl) == sum(bool(x) for x in mask.ravel())
        assert all(mask[v, u] for u, v in fl.coords)


def test_extract_validation():
    with pytest.raises(DimensionMismatchError):
        extract_masked_features(np.ones((4, 4, 2)), np.ones((4, 5), bool))
    with pytest.raises(DimensionMismatchError):
        extract_masked_features(np.ones((4, 4)), np.ones((4, 4), bool))
    with pytest.raises(InvariantError):
        extract_masked_features(np.full((4, 4, 2), np.nan), np.ones((4, 4), bool))


# -- nearest-neighbor matching -----------------------------------------------------

def test_orthonormal_identity_pairing():
    eye = np.eye(6)
    fl = FeatureList(np.column_stack([np.arange(6), np.zeros(6, int)]), eye)
    m = match_nearest_neighbor(fl, fl, mu_t=0.25)
    assert np.array_equal(m.coords_a, m.coords_q)
    assert np.all(m.distances == 0)


def test_mu_t_zero_with_noise_raises(rng):
    fa = _features(rng, 30)
    fq = FeatureList(fa.coords, fa.vectors + 0.1 * rng.normal(size=fa.vectors.shape))
    with pytest.raises(NoMatchesError):
        match_nearest_neighbor(fa, fq, mu_t=0.0)


def test_top_c_matches_brute_force(rng):
    fa, fq = _features(rng, 100), _features(rng, 100)
    m = match_nearest_neighbor(fa, fq, mu_t=0.25, max_matches=10)
    ia, iq, d = brute_force_nn(fa, fq, 0.25, 10)
    assert len(m) == 10 == len(ia)
    assert np.array_equal(m.coords_a, fa.coords[ia])
    assert np.array_equal(m.coords_q, fq.coords[iq])
    assert np.allclose(m.distances, d, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_uncapped_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    fa, fq = _features(rng, 60, 4), _features(rng, 50, 4)
    m = match_nearest_neighbor(fa, fq, mu_t=0.3, max_matches=2000)
    ia, iq, d = brute_force_nn(fa, fq, 0.3, 2000)
    assert np.array_equal(m.coords_a, fa.coords[ia])
    assert np.array_equal(m.coords_q, fq.coords[iq])


def test_ties_go_to_first_query():
    fa = FeatureList(np.array([[0, 0]]), np.array([[1.0, 0.0]]))
    fq = FeatureList(np.array([[0, 0], [1, 0]]), np.array([[1.0, 0.0], [2.0, 0.0]]))
    m = match_nearest_neighbor(fa, fq)
    assert m.coords_q.tolist() == [[0, 0]]


def test_mutual_filter(rng):
    fa, fq = _features(rng, 80), _features(rng, 80)
    plain = match_nearest_neighbor(fa, fq, mu_t=1.0)
    mutual = match_nearest_neighbor(fa, fq, mu_t=1.0, mutual=True)
    d = pairwise_cosine_distance(fa.vectors, fq.vectors)
    assert len(mutual) < len(plain)
    for ca, cq in zip(mutual.coords_a, mutual.coords_q):
        i = int(np.nonzero((fa.coords == ca).all(1))[0][0])
        j = int(np.nonzero((fq.coords == cq).all(1))[0][0])
        assert np.argmin(d[i]) == j and np.argmin(d[:, j]) == i


def test_threads_do_not_change_result(rng):
    fa, fq = _features(rng, 2500, 8), _features(rng, 1200, 8)
    m1 = match_nearest_neighbor(fa, fq, mu_t=0.4, max_matches=300, threads=1)
    m4 = match_nearest_neighbor(fa, fq, mu_t=0.4, max_matches=300, threads=4)
    assert np.array_equal(m1.coords_a, m4.coords_a) and np.array_equal(m1.coords_q, m4.coords_q)
    assert np.array_equal(m1.distances, m4.distances)


def test_match_feature_maps_empty_mask(rng):
    f = rng.normal(size=(8, 8, 4))
    with pytest.raises(EmptyMaskError):
        match_feature_maps(f, np.zeros((8, 8), bool), f, np.ones((8, 8), bool))


def test_match_feature_maps_identical_maps(rng):
    f = rng.normal(size=(8, 8, 16))
    mask = rng.random((8, 8)) < 0.5
    m = match_feature_maps(f, mask, f, mask)
    assert np.array_equal(m.coords_a, m.coords_q)
    assert len(m) == mask.sum()


def test_match_set_validation():
    with pytest.raises(InvariantError):
        MatchSet([[0, 0]], [[0, 0], [1, 1]], [0.1])


# -- lifting -----------------------------------------------------------------------

def test_lift_principal_points():
    depth = np.zeros((480, 640))
    depth[240, 320] = 1.0
    m = MatchSet([[320, 240]], [[320, 240]], [0.0])
    pa, pq = lift_matches_to_3d(m, depth, depth, K, K)
    assert pa.tolist() == [[0.0, 0.0, 1.0]] and pq.tolist() == [[0.0, 0.0, 1.0]]


def test_lift_drops_invalid_depth():
    da = np.ones((480, 640))
    dq = np.ones((480, 640))
    dq[5, 5] = 0.0
    m = MatchSet([[1, 1], [2, 2], [3, 3]], [[1, 1], [5, 5], [3, 3]], [0, 0, 0])
    pa, pq, keep = lift_matches_to_3d(m, da, dq, K, K, return_index=True)
    assert keep.tolist() == [0, 2]
    assert len(pa) == len(pq) == 2
    with pytest.raises(InvalidMatchDepthError):
        lift_matches_to_3d(m, np.zeros_like(da), dq, K, K)
    with pytest.raises(OutOfBoundsError):
        lift_matches_to_3d(MatchSet([[640, 0]], [[0, 0]], [0]), da, dq, K, K)


def test_lift_plane_fit(rng):
    # plane n.x = c rendered exactly into a depth map
    n, c = np.array([0.1, -0.2, 1.0]), 1.5
    vv, uu = np.mgrid[0:480, 0:640]
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu, float)], -1)
    depth = c / (rays @ n)
    pick = rng.choice(640 * 480, 50, replace=False)
    coords = np.column_stack([pick % 640, pick // 640])
    m = MatchSet(coords, coords, np.zeros(50))
    pa, _ = lift_matches_to_3d(m, depth, depth, K, K)
    assert np.abs(pa @ n - c).max() < 1e-6
    # independent least-squares plane through the lifted points
    A = np.column_stack([pa[:, :2], np.ones(50)])
    coef, *_ = np.linalg.lstsq(A, pa[:, 2], rcond=None)
    assert np.allclose(coef, [-n[0] / n[2], -n[1] / n[2], c / n[2]], atol=1e-6)
