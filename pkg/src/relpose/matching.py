"""Masked descriptor extraction, nearest-neighbor matching and 3D lifting.

Feature maps are ``(H, W, F)`` arrays, masks ``(H, W)`` boolean arrays. The
descriptor distance is the cosine similarity mapped onto [0, 1]:
``dist(a, b) = (1 - cos(a, b)) / 2``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyMaskError,
    InvalidMatchDepthError,
    InvariantError,
    NoMatchesError,
    OutOfBoundsError,
    ZeroVectorError,
)
from .geometry import CameraIntrinsics, backproject_pixels

DEFAULT_MU_T = 0.25
DEFAULT_MAX_MATCHES = 2000
_CHUNK = 1024


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVectorError("cosine distance of a zero vector")
    cos = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float((1.0 - cos) / 2.0)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ZeroVectorError("descriptor with zero norm")
    return x / n


def pairwise_cosine_distance(a, b) -> np.ndarray:
    """(N, M) matrix of cosine distances between rows of ``a`` and ``b``."""
    d = (1.0 - normalize_rows(a) @ normalize_rows(b).T) / 2.0
    return np.clip(d, 0.0, 1.0)


@dataclass
class FeatureList:
    """Descriptors of the mask-true pixels, in row-major scan order."""

    coords: np.ndarray  # (N, 2) int, columns (u, v)
    vectors: np.ndarray  # (N, F)

    def __len__(self):
        return len(self.coords)


@dataclass
class MatchSet:
    coords_a: np.ndarray  # (N, 2) int (u, v) in the anchor
    coords_q: np.ndarray  # (N, 2) int (u, v) in the query
    distances: np.ndarray  # (N,)

    def __post_init__(self):
        self.coords_a = np.asarray(self.coords_a, dtype=np.int64).reshape(-1, 2)
        self.coords_q = np.asarray(self.coords_q, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=float).reshape(-1)
        if not (len(self.coords_a) == len(self.coords_q) == len(self.distances)):
            raise InvariantError("match set columns have different lengths")

    def __len__(self):
        return len(self.distances)

    def subset(self, idx) -> MatchSet:
        return MatchSet(self.coords_a[idx], self.coords_q[idx], self.distances[idx])


def check_feature_map(fmap: np.ndarray) -> np.ndarray:
    fmap = np.asarray(fmap)
    if fmap.ndim != 3 or fmap.shape[2] < 1:
        raise DimensionMismatchError("<feature map>", "shape", f"expected (H, W, F), got {fmap.shape}")
    if not np.all(np.isfinite(fmap)):
        raise InvariantError("feature map has non-finite values")
    return fmap


def extract_masked_features(fmap: np.ndarray, mask: np.ndarray) -> FeatureList:
    fmap = check_feature_map(fmap)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != fmap.shape[:2]:
        raise DimensionMismatchError("<mask>", "shape", f"mask {mask.shape} vs feature map {fmap.shape[:2]}")
    v, u = np.nonzero(mask)
    if len(v) == 0:
        raise EmptyMaskError("mask selects no pixels")
    return FeatureList(np.column_stack([u, v]).astype(np.int64), fmap[v, u].copy())


def _nn_indices(x_hat, y_hat, threads=1) -> np.ndarray:
    """Index of the most similar row of ``y_hat`` for each row of ``x_hat``.

    ``np.argmax`` returns the first maximum, so ties resolve to scan order.
    """
    bounds = [(lo, min(lo + _CHUNK, len(x_hat))) for lo in range(0, len(x_hat), _CHUNK)]

    def chunk(b):
        return np.argmax(x_hat[b[0]:b[1]] @ y_hat.T, axis=1)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return np.concatenate(list(pool.map(chunk, bounds)))
    return np.concatenate([chunk(b) for b in bounds])


def match_nearest_neighbor(
    fa: FeatureList,
    fq: FeatureList,
    mu_t: float = DEFAULT_MU_T,
    max_matches: int = DEFAULT_MAX_MATCHES,
    mutual: bool = False,
    threads: int = 1,
) -> MatchSet:
    """Match every anchor descriptor to its nearest query descriptor.

    Pairs farther than ``mu_t`` are rejected; when more than ``max_matches``
    survive, the lowest-distance ones are kept (ties broken by anchor then
    query scan order). Search is exact. With ``mutual=True`` a pair is kept
    only if the anchor descriptor is also the query descriptor's nearest
    neighbor.
    """
    if len(fa) == 0 or len(fq) == 0:
        raise EmptyMaskError("cannot match an empty feature list")
    a_hat = normalize_rows(fa.vectors)
    q_hat = normalize_rows(fq.vectors)
    nn = _nn_indices(a_hat, q_hat, threads)
    dist = np.clip((1.0 - np.einsum("ij,ij->i", a_hat, q_hat[nn])) / 2.0, 0.0, 1.0)

    idx_a = np.arange(len(a_hat))
    keep = dist <= mu_t
    if mutual:
        back = _nn_indices(q_hat, a_hat, threads)
        keep &= back[nn] == idx_a
    idx_a, nn, dist = idx_a[keep], nn[keep], dist[keep]
    if len(dist) == 0:
        raise NoMatchesError(f"no nearest-neighbor pair within mu_T={mu_t}")
    if len(dist) > max_matches:
        order = np.lexsort((nn, idx_a, dist))[:max_matches]
        order.sort()
        idx_a, nn, dist = idx_a[order], nn[order], dist[order]
    return MatchSet(fa.coords[idx_a], fq.coords[nn], dist)


def match_feature_maps(fmap_a, mask_a, fmap_q, mask_q, mu_t=DEFAULT_MU_T,
                       max_matches=DEFAULT_MAX_MATCHES, mutual=False, threads=1) -> MatchSet:
    fa = extract_masked_features(fmap_a, mask_a)
    fq = extract_masked_features(fmap_q, mask_q)
    return match_nearest_neighbor(fa, fq, mu_t, max_matches, mutual=mutual, threads=threads)


def lift_matches_to_3d(
    matches: MatchSet,
    depth_a: np.ndarray,
    depth_q: np.ndarray,
    intrinsics_a: CameraIntrinsics,
    intrinsics_q: CameraIntrinsics,
    return_index: bool = False,
):
    """Backproject both ends of every match.

    Pairs with missing depth (0) in either view are dropped. Returns the two
    parallel ``(N, 3)`` clouds, plus the kept match indices if requested.
    """
    depth_a = np.asarray(depth_a, dtype=float)
    depth_q = np.asarray(depth_q, dtype=float)
    ca, cq = matches.coords_a, matches.coords_q
    for c, depth, name in ((ca, depth_a, "anchor"), (cq, depth_q, "query")):
        h, w = depth.shape
        if len(c) and (c[:, 0].min() < 0 or c[:, 1].min() < 0 or c[:, 0].max() >= w or c[:, 1].max() >= h):
            raise OutOfBoundsError(f"match coordinate outside the {name} depth map")
    da = depth_a[ca[:, 1], ca[:, 0]]
    dq = depth_q[cq[:, 1], cq[:, 0]]
    keep = np.nonzero((da > 0) & (dq > 0))[0]
    if len(keep) == 0:
        raise InvalidMatchDepthError("every match has missing depth in at least one view")
    pa = backproject_pixels(intrinsics_a, ca[keep], da[keep])
    pq = backproject_pixels(intrinsics_q, cq[keep], dq[keep])
    if return_index:
        return pa, pq, keep
    return pa, pq
