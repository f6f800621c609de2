"""Z-buffered point splatting."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics


def disk_offsets(radius: int) -> np.ndarray:
    """Pixel offsets ``(du, dv)`` with ``du^2 + dv^2 < radius^2``; radius 1 is a single pixel."""
    r = int(radius)
    if r < 1:
        raise ValueError(f"splat radius must be >= 1, got {radius}")
    d = np.arange(-r + 1, r)
    du, dv = np.meshgrid(d, d)
    keep = du**2 + dv**2 < r * r
    return np.column_stack([du[keep], dv[keep]])


def median_spacing(points) -> float:
    """Median distance from each point to its nearest neighbor."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def splat_radii(intrinsics: CameraIntrinsics, z, spacing: float) -> np.ndarray:
    """Per-point radius ``max(1, round(0.5 * f * spacing / z))``."""
    f = 0.5 * (intrinsics.fx + intrinsics.fy)
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.rint(0.5 * f * spacing / np.where(z > 0, z, np.inf))
    return np.maximum(1, r).astype(np.int64)


def splat(points_cam, intrinsics: CameraIntrinsics, radius=1):
    """Render camera-frame points into a depth buffer.

    ``radius`` is an int or a per-point array. Each point covers the disk of
    pixels around its rounded projection; the nearest depth wins, and equal
    depths go to the lower point index.

    Returns ``(depth, index)``: depth in meters with 0 where nothing was drawn,
    and the winning point index per pixel (-1 where empty).
    """
    p = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    h, w = intrinsics.height, intrinsics.width
    depth = np.zeros((h, w))
    index = np.full((h, w), -1, dtype=np.int64)
    radii = np.broadcast_to(np.asarray(radius, dtype=np.int64), (len(p),))
    front = np.nonzero(p[:, 2] > 0)[0]
    if len(front) == 0:
        return depth, index
    z = p[front, 2]
    u = np.rint(intrinsics.fx * p[front, 0] / z + intrinsics.cx).astype(np.int64)
    v = np.rint(intrinsics.fy * p[front, 1] / z + intrinsics.cy).astype(np.int64)

    pix, zs, ids = [], [], []
    for r in np.unique(radii[front]):
        sel = radii[front] == r
        for du, dv in disk_offsets(r):
            uu, vv = u[sel] + du, v[sel] + dv
            inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            pix.append(vv[inside] * w + uu[inside])
            zs.append(z[sel][inside])
            ids.append(front[sel][inside])
    pix = np.concatenate(pix)
    if len(pix) == 0:
        return depth, index
    zs = np.concatenate(zs)
    ids = np.concatenate(ids)
    order = np.lexsort((ids, zs, pix))
    pix, zs, ids = pix[order], zs[order], ids[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    depth.flat[pix[first]] = zs[first]
    index.flat[pix[first]] = ids[first]
    return depth, index


def splat_closed(points_cam, intrinsics: CameraIntrinsics, radius, see_through_tolerance: float):
    """:func:`splat` with aliasing holes closed.

    Splats of a sample grid can alias into holes through which farther
    surfaces show. A pixel whose winner lies more than
    ``see_through_tolerance`` behind the nearest point of the same render at
    ``radius + 1`` takes that nearer point instead. Empty pixels stay empty,
    so silhouettes are not dilated.
    """
    depth, index = splat(points_cam, intrinsics, radius)
    front_depth, front_index = splat(points_cam, intrinsics, np.asarray(radius) + 1)
    leak = (depth > 0) & (depth > front_depth + see_through_tolerance)
    depth[leak] = front_depth[leak]
    index[leak] = front_index[leak]
    return depth, index
