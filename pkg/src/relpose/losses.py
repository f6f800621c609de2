"""Hardest-contrastive matching loss, Dice mask loss and their gradients.

All gradients are analytic and returned with the same shape as the input
they differentiate (feature maps ``(H, W, F)``, masks ``(H, W)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatchError, EmptySupervisionError, InvariantError, OutOfBoundsError
from .matching import check_feature_map, normalize_rows

DICE_EPS = 1e-6


@dataclass
class MatchSupervision:
    """Ground-truth pixel correspondences ``(u, v)`` between anchor and query."""

    coords_a: np.ndarray
    coords_q: np.ndarray

    def __post_init__(self):
        self.coords_a = np.asarray(self.coords_a, dtype=np.int64).reshape(-1, 2)
        self.coords_q = np.asarray(self.coords_q, dtype=np.int64).reshape(-1, 2)
        if len(self.coords_a) != len(self.coords_q):
            raise InvariantError("supervision sides have different lengths")
        if len(np.unique(np.hstack([self.coords_a, self.coords_q]), axis=0)) != len(self.coords_a):
            raise InvariantError("supervision contains duplicate pairs")

    def __len__(self):
        return len(self.coords_a)

    def subsample(self, max_pairs: int, rng: np.random.Generator) -> MatchSupervision:
        """Uniform subset of at most ``max_pairs`` pairs, original order kept."""
        if len(self) <= max_pairs:
            return self
        idx = np.sort(rng.choice(len(self), size=max_pairs, replace=False))
        return MatchSupervision(self.coords_a[idx], self.coords_q[idx])


@dataclass(frozen=True)
class LossParams:
    mu_p: float = 0.2
    mu_n: float = 0.9
    tau: float = 20.0
    lambda_p: float = 0.5
    lambda_n: float = 0.5
    max_pairs: int = 2000

    def __post_init__(self):
        if not (0 <= self.mu_p < self.mu_n <= 1):
            raise ValueError(f"need 0 <= mu_p < mu_n <= 1, got mu_p={self.mu_p}, mu_n={self.mu_n}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_p < 0 or self.lambda_n < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.max_pairs < 1:
            raise ValueError("max_pairs must be >= 1")


@dataclass
class LossReport:
    positive: float
    negative: float
    mask: float
    total: float
    grad_fmap_a: np.ndarray = field(repr=False)
    grad_fmap_q: np.ndarray = field(repr=False)
    grad_pred_a: np.ndarray = field(repr=False)
    grad_pred_q: np.ndarray = field(repr=False)
    num_pairs: int = 0

    def values(self) -> dict:
        return {"positive": self.positive, "negative": self.negative, "mask": self.mask, "total": self.total}


def cosine_distance_with_grad(a: np.ndarray, b: np.ndarray):
    """Row-wise ``(1 - cos) / 2`` and its gradients with respect to ``a`` and ``b``."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvariantError("zero descriptor in loss computation")
    a_hat, b_hat = a / na, b / nb
    cos = np.einsum("ij,ij->i", a_hat, b_hat)[:, None]
    grad_a = -(b_hat - cos * a_hat) / (2.0 * na)
    grad_b = -(a_hat - cos * b_hat) / (2.0 * nb)
    return (1.0 - cos[:, 0]) / 2.0, grad_a, grad_b


def _gather(fmap, coords, name):
    h, w = fmap.shape[:2]
    if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= w or coords[:, 1].max() >= h):
        raise OutOfBoundsError(f"supervision coordinate outside the {name} feature map")
    return fmap[coords[:, 1], coords[:, 0]].astype(float)


def _prepare(fa, fq, sup):
    fa = check_feature_map(fa)
    fq = check_feature_map(fq)
    if fa.shape[2] != fq.shape[2]:
        raise DimensionMismatchError("<feature map>", "dim", f"{fa.shape[2]} vs {fq.shape[2]}")
    if len(sup) == 0:
        raise EmptySupervisionError("no ground-truth matches")
    return fa, fq


def positive_loss(fa, fq, sup: MatchSupervision, mu_p: float = 0.2):
    """Mean hinge ``max(0, dist - mu_p)`` over the ground-truth pairs.

    Returns ``(value, (grad_fa, grad_fq))``.
    """
    fa, fq = _prepare(fa, fq, sup)
    xa = _gather(fa, sup.coords_a, "anchor")
    xq = _gather(fq, sup.coords_q, "query")
    d, ga, gq = cosine_distance_with_grad(xa, xq)
    n = len(sup)
    active = d > mu_p
    value = float(np.sum(d[active] - mu_p) / n)

    grad_a = np.zeros(fa.shape)
    grad_q = np.zeros(fq.shape)
    ca, cq = sup.coords_a[active], sup.coords_q[active]
    np.add.at(grad_a, (ca[:, 1], ca[:, 0]), ga[active] / n)
    np.add.at(grad_q, (cq[:, 1], cq[:, 0]), gq[active] / n)
    return value, (grad_a, grad_q)


def _pixel_distances(x, y) -> np.ndarray:
    return cdist(np.asarray(x, dtype=float), np.asarray(y, dtype=float))


def candidate_negative_mask(coords, tau: float) -> np.ndarray:
    """Boolean matrix whose row ``i`` marks the candidate negatives of ``i``."""
    coords = np.asarray(coords).reshape(-1, 2)
    mask = _pixel_distances(coords, coords) >= tau
    np.fill_diagonal(mask, False)
    return mask


def candidate_negative_set(coords, i: int, tau: float) -> np.ndarray:
    """Indices ``k != i`` whose pixel lies at least ``tau`` away from pixel ``i``."""
    coords = np.asarray(coords).reshape(-1, 2)
    if len(coords) == 0:
        raise EmptySupervisionError("empty coordinate list")
    d = _pixel_distances(coords[i : i + 1], coords)[0]
    keep = d >= tau
    keep[i] = False
    return np.nonzero(keep)[0]


def hardest_negatives(coords, feats, tau: float, pool_coords=None, pool_feats=None, chunk=512):
    """Closest-in-descriptor candidate negative of every feature.

    By default the pool is the features themselves (row ``i`` excluded).
    Returns ``(index, distance)``; rows with an empty candidate set get index
    -1 and distance ``inf``. Ties go to the lowest pool index.
    """
    coords = np.asarray(coords).reshape(-1, 2)
    same_pool = pool_coords is None
    if same_pool:
        pool_coords, pool_feats = coords, feats
    f_hat = normalize_rows(feats)
    p_hat = normalize_rows(pool_feats)
    idx = np.full(len(coords), -1, dtype=np.int64)
    best = np.full(len(coords), np.inf)
    for lo in range(0, len(coords), chunk):
        hi = min(lo + chunk, len(coords))
        cand = _pixel_distances(coords[lo:hi], pool_coords) >= tau
        if same_pool:
            cand[np.arange(hi - lo), np.arange(lo, hi)] = False
        d = np.clip((1.0 - f_hat[lo:hi] @ p_hat.T) / 2.0, 0.0, 1.0)
        d[~cand] = np.inf
        k = np.argmin(d, axis=1)
        has = cand.any(axis=1)
        idx[lo:hi] = np.where(has, k, -1)
        best[lo:hi] = np.where(has, d[np.arange(hi - lo), k], np.inf)
    return idx, best


def _negative_side(fmap, coords, mu_n, tau, pool):
    feats = _gather(fmap, coords, "feature")
    if pool == "matched":
        pool_coords, pool_feats = None, None
        pool_pixels = coords
    elif pool == "all":
        h, w = fmap.shape[:2]
        vv, uu = np.mgrid[0:h, 0:w]
        pool_pixels = np.column_stack([uu.ravel(), vv.ravel()])
        pool_coords, pool_feats = pool_pixels, fmap.reshape(h * w, -1).astype(float)
    else:
        raise ValueError(f"unknown negative pool {pool!r}")

    k, _ = hardest_negatives(coords, feats, tau, pool_coords, pool_feats)
    grad = np.zeros(fmap.shape)
    has = k >= 0
    n = int(has.sum())
    if n == 0:
        return 0.0, grad
    src = np.nonzero(has)[0]
    neg_feats = (feats if pool == "matched" else pool_feats)[k[src]]
    d, g_i, g_k = cosine_distance_with_grad(feats[src], neg_feats)
    hinge = mu_n - d
    active = hinge > 0
    value = float(np.sum(hinge[active]) / (2.0 * n))

    coeff = -1.0 / (2.0 * n)
    ci = coords[src[active]]
    ck = pool_pixels[k[src[active]]]
    np.add.at(grad, (ci[:, 1], ci[:, 0]), coeff * g_i[active])
    np.add.at(grad, (ck[:, 1], ck[:, 0]), coeff * g_k[active])
    return value, grad


def negative_loss(fa, fq, sup: MatchSupervision, mu_n: float = 0.9, tau: float = 20.0, pool: str = "matched"):
    """Hardest-negative hinge, averaged separately over each view.

    Each view contributes ``sum_i max(0, mu_n - dist(f_i, f_hardest(i))) / (2 n)``
    where ``n`` counts the matched features of that view with at least one
    candidate negative. ``pool="all"`` searches negatives over every pixel of
    the map instead of the matched features only.

    Returns ``(value, (grad_fa, grad_fq))``.
    """
    fa, fq = _prepare(fa, fq, sup)
    va, ga = _negative_side(fa, sup.coords_a, mu_n, tau, pool)
    vq, gq = _negative_side(fq, sup.coords_q, mu_n, tau, pool)
    return va + vq, (ga, gq)


def dice_loss(pred, gt, eps: float = DICE_EPS):
    """Soft Dice loss ``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``.

    Returns ``(value, grad_pred)``.
    """
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise DimensionMismatchError("<mask>", "shape", f"prediction {p.shape} vs target {g.shape}")
    inter = np.sum(p * g)
    denom = np.sum(p) + np.sum(g) + eps
    num = 2.0 * inter + eps
    grad = -(2.0 * g * denom - num) / denom**2
    return float(1.0 - num / denom), grad


def total_loss(
    fa,
    fq,
    pred_a,
    pred_q,
    gt_a,
    gt_q,
    sup: MatchSupervision,
    params: LossParams = LossParams(),
    rng: np.random.Generator | None = None,
    pool: str = "matched",
) -> LossReport:
    """``mask + lambda_n * negative + lambda_p * positive``.

    The mask term averages the Dice losses of the two views. Supervision
    larger than ``params.max_pairs`` is subsampled with ``rng`` (seed 0 if
    none is given).
    """
    if len(sup) > params.max_pairs:
        sup = sup.subsample(params.max_pairs, rng if rng is not None else np.random.default_rng(0))
    lp, (gpa, gpq) = positive_loss(fa, fq, sup, params.mu_p)
    ln, (gna, gnq) = negative_loss(fa, fq, sup, params.mu_n, params.tau, pool=pool)
    da, gda = dice_loss(pred_a, gt_a)
    dq, gdq = dice_loss(pred_q, gt_q)
    lm = (da + dq) / 2.0
    return LossReport(
        positive=lp,
        negative=ln,
        mask=lm,
        total=lm + params.lambda_n * ln + params.lambda_p * lp,
        grad_fmap_a=params.lambda_p * gpa + params.lambda_n * gna,
        grad_fmap_q=params.lambda_p * gpq + params.lambda_n * gnq,
        grad_pred_a=gda / 2.0,
        grad_pred_q=gdq / 2.0,
        num_pairs=len(sup),
    )
