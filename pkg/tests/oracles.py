"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, central differences)
so it shares no code paths with the library.
"""

import math

import numpy as np


def central_difference(f, x, entries, h=1e-5):
    """Numerical gradient of scalar ``f`` at the listed flat ``entries`` of ``x``."""
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    out = np.zeros(len(entries))
    for n, e in enumerate(entries):
        old = flat[e]
        flat[e] = old + h
        fp = f(x)
        flat[e] = old - h
        fm = f(x)
        flat[e] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic, numeric):
    """Norm-wise relative error, with an absolute floor for near-zero gradients."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def cos_dist(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return (1 - dot / (na * nb)) / 2


def candidate_sets(coords, tau):
    out = []
    for i, (ui, vi) in enumerate(coords):
        out.append([k for k, (uk, vk) in enumerate(coords)
                    if k != i and math.hypot(ui - uk, vi - vk) >= tau])
    return out


def hardest_negatives(coords, feats, tau):
    """(index, distance) per row; (-1, inf) when the candidate set is empty.
    Ties go to the lowest index."""
    idx, dist = [], []
    for i, cand in enumerate(candidate_sets(coords, tau)):
        best_k, best_d = -1, math.inf
        for k in cand:
            d = min(max(cos_dist(feats[i], feats[k]), 0.0), 1.0)
            if d < best_d:
                best_k, best_d = k, d
        idx.append(best_k)
        dist.append(best_d)
    return idx, dist


def negative_loss_value(fa, fq, coords_a, coords_q, mu_n, tau):
    total = 0.0
    for fmap, coords in ((fa, coords_a), (fq, coords_q)):
        feats = [fmap[v, u] for u, v in coords]
        idx, dist = hardest_negatives(coords, feats, tau)
        n = sum(k >= 0 for k in idx)
        if n:
            total += sum(max(0.0, mu_n - d) for k, d in zip(idx, dist) if k >= 0) / (2 * n)
    return total


def positive_loss_value(fa, fq, coords_a, coords_q, mu_p):
    vals = [max(0.0, cos_dist(fa[va, ua], fq[vq, uq]) - mu_p)
            for (ua, va), (uq, vq) in zip(coords_a, coords_q)]
    return sum(vals) / len(vals)


def dice_value(p, g, eps=1e-6):
    inter = float(np.sum(p * g))
    return 1 - (2 * inter + eps) / (float(np.sum(p)) + float(np.sum(g)) + eps)


def compatibility(src, dst, beta):
    n = len(src)
    m = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            ds = math.dist(src[i], src[j])
            dd = math.dist(dst[i], dst[j])
            m[i, j] = abs(ds - dd) <= beta
    return m


def kabsch_by_optimizer(src, dst):
    """Least-squares rigid fit by generic minimization over a rotation vector."""
    from scipy.optimize import least_squares
    from scipy.spatial.transform import Rotation

    def resid(x):
        return (Rotation.from_rotvec(x[:3]).apply(src) + x[3:] - dst).ravel()

    best = None
    for start in np.eye(3) * 1.5:  # a few starts guard against local minima
        sol = least_squares(resid, np.r_[start, np.zeros(3)], xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or sol.cost < best.cost:
            best = sol
    return Rotation.from_rotvec(best.x[:3]).as_matrix(), best.x[3:]


def mssd_exhaustive(points, syms, gt, pred):
    best = math.inf
    for s in syms:
        worst = 0.0
        for p in points:
            a = gt.rotation @ (s.rotation @ p + s.translation) + gt.translation
            b = pred.rotation @ p + pred.translation
            worst = max(worst, math.dist(a, b))
        best = min(best, worst)
    return best
