"""Rigid registration of 3D correspondences with spatial-consistency pruning.

Rigid motions preserve lengths, so two correspondences ``i, j`` can only both
be inliers if ``| |src_i - src_j| - |dst_i - dst_j| |`` is small. The
registration builds that pairwise compatibility graph, grows a mutually
compatible consensus set around each of the best-connected seeds, fits each
set with a Kabsch solve and keeps the hypothesis with the most inliers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import DegenerateConfigurationError, InvariantError, RegistrationError
from .geometry import RigidTransform


@dataclass(frozen=True)
class RegistrationParams:
    beta: float = 0.010
    inlier_threshold: float = 0.010
    max_seeds: int = 32
    local_rounds: int = 3
    seed: int = 0
    method: str = "spatial"  # or "ransac"
    ransac_iterations: int = 1000

    def __post_init__(self):
        if not (self.beta > 0 and self.inlier_threshold > 0):
            raise ValueError("beta and inlier_threshold must be positive")
        if self.max_seeds < 1 or self.local_rounds < 0:
            raise ValueError("max_seeds must be >= 1 and local_rounds >= 0")
        if self.method not in ("spatial", "ransac"):
            raise ValueError(f"unknown registration method {self.method!r}")


@dataclass
class PoseEstimate:
    transform: RigidTransform
    inliers: np.ndarray
    rmse: float
    num_correspondences: int

    @property
    def inlier_ratio(self) -> float:
        return len(self.inliers) / self.num_correspondences if self.num_correspondences else 0.0


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid transform mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvariantError(f"src {src.shape} and dst {dst.shape} differ")
    if len(src) < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != len(src) or np.any(w < 0) or w.sum() <= 0:
        raise InvariantError("weights must be nonnegative with positive sum")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs, xd = src - mu_s, dst - mu_d
    H = (xs * w[:, None]).T @ xd
    U, S, Vt = np.linalg.svd(H)
    # rank(H) < 2 leaves the rotation about the degenerate axis undetermined
    if S[0] == 0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateConfigurationError("correspondences are collinear or coincident")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


def residuals(t: RigidTransform, src, dst) -> np.ndarray:
    return np.linalg.norm(t.apply(src) - np.asarray(dst, dtype=float), axis=1)


def build_spatial_compatibility(src, dst, beta: float) -> np.ndarray:
    """Boolean N x N matrix: ``| |src_i - src_j| - |dst_i - dst_j| | <= beta``."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    compat = np.abs(squareform(pdist(src)) - squareform(pdist(dst))) <= beta
    np.fill_diagonal(compat, True)
    return compat


def _grow_consensus(compat: np.ndarray, seed: int) -> np.ndarray:
    """Greedy clique of mutually compatible correspondences around ``seed``.

    Neighbors are visited by decreasing degree inside the seed's neighborhood
    (index order on ties); one joins if it is compatible with every member.
    """
    nbrs = np.nonzero(compat[seed])[0]
    nbrs = nbrs[nbrs != seed]
    local_degree = compat[np.ix_(nbrs, nbrs)].sum(axis=1)
    order = nbrs[np.lexsort((nbrs, -local_degree))]
    alive = compat[seed].copy()
    members = [seed]
    for c in order:
        if alive[c]:
            members.append(c)
            alive &= compat[c]
    return np.array(sorted(members))


def _score(t: RigidTransform, src, dst, thr):
    r = residuals(t, src, dst)
    return int(np.sum(r <= thr)), r


def _hypothesis(compat, src, dst, seed, thr):
    members = _grow_consensus(compat, seed)
    if len(members) < 3:
        return None
    try:
        t = kabsch(src[members], dst[members])
    except DegenerateConfigurationError:
        return None
    count, r = _score(t, src, dst, thr)
    return count, float(np.sqrt(np.mean(r[r <= thr] ** 2))) if count else np.inf, t


def _refine(t, src, dst, params):
    for _ in range(params.local_rounds):
        inl = np.nonzero(residuals(t, src, dst) <= params.inlier_threshold)[0]
        if len(inl) < 3:
            break
        try:
            t = kabsch(src[inl], dst[inl])
        except DegenerateConfigurationError:
            break
    r = residuals(t, src, dst)
    inl = np.nonzero(r <= params.inlier_threshold)[0]
    if len(inl) < 3:
        raise RegistrationError(f"best hypothesis has only {len(inl)} inliers")
    return PoseEstimate(t, inl, float(np.sqrt(np.mean(r[inl] ** 2))), len(src))


def _check_corr(src, dst):
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvariantError(f"src {src.shape} and dst {dst.shape} differ")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise InvariantError("non-finite correspondence coordinates")
    if len(src) < 3:
        raise RegistrationError(f"need at least 3 correspondences, got {len(src)}")
    return src, dst


def register(src, dst, params: RegistrationParams = RegistrationParams(), threads: int = 1) -> PoseEstimate:
    """Estimate the transform mapping ``src`` (anchor frame) onto ``dst`` (query frame)."""
    src, dst = _check_corr(src, dst)
    if params.method == "ransac":
        return register_ransac(src, dst, params)

    compat = build_spatial_compatibility(src, dst, params.beta)
    degree = compat.sum(axis=1)
    seeds = np.lexsort((np.arange(len(src)), -degree))[: params.max_seeds]

    def run(s):
        return _hypothesis(compat, src, dst, s, params.inlier_threshold)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            hyps = list(pool.map(run, seeds))
    else:
        hyps = [run(s) for s in seeds]

    best = None
    for h in hyps:  # seed order decides ties, independent of thread count
        if h is not None and (best is None or (h[0], -h[1]) > (best[0], -best[1])):
            best = h
    if best is None or best[0] < 3:
        raise RegistrationError("no consensus set with at least 3 inliers")
    return _refine(best[2], src, dst, params)


def register_ransac(src, dst, params: RegistrationParams = RegistrationParams()) -> PoseEstimate:
    """Plain 3-point RANSAC + Kabsch, without the compatibility stage."""
    src, dst = _check_corr(src, dst)
    rng = np.random.default_rng(params.seed)
    best = None
    for _ in range(params.ransac_iterations):
        sample = rng.choice(len(src), size=3, replace=False)
        try:
            t = kabsch(src[sample], dst[sample])
        except DegenerateConfigurationError:
            continue
        count, _ = _score(t, src, dst, params.inlier_threshold)
        if best is None or count > best[0]:
            best = (count, t)
    if best is None or best[0] < 3:
        raise RegistrationError("RANSAC found no hypothesis with at least 3 inliers")
    return _refine(best[1], src, dst, params)
