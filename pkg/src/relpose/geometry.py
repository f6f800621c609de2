"""Pinhole camera geometry, rigid transforms and bounding-box squaring.

Conventions: depth is in meters, pixel ``(u, v)`` is (column, row) and integer
coordinates are pixel centers. Images are indexed ``array[v, u]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    BoxTooLargeError,
    GeometryError,
    InvalidDepthError,
    InvariantError,
    OutOfBoundsError,
)

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        """Image shape as ``(height, width)``."""
        return (self.height, self.width)

    def contains(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation acting as ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvariantError("rigid transform has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvariantError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def inverse(self) -> RigidTransform:
        return invert(self)

    def apply(self, points) -> np.ndarray:
        return apply(self, points)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform mapping ``x`` to ``a(b(x))``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def apply(t: RigidTransform, points) -> np.ndarray:
    """Apply ``t`` to an (N, 3) array (or a single 3-vector)."""
    p = np.asarray(points, dtype=float)
    return p @ t.rotation.T + t.translation


def rotation_error(R_a, R_b) -> float:
    """Geodesic angle in radians between two rotations.

    Uses the chordal form 2*asin(|Ra - Rb|_F / sqrt(8)), which stays accurate
    near zero where arccos of the trace loses half the available digits.
    """
    chord = np.linalg.norm(np.asarray(R_a) - np.asarray(R_b)) / np.sqrt(8.0)
    return float(2.0 * np.arcsin(min(1.0, chord)))


def translation_error(t_a, t_b) -> float:
    return float(np.linalg.norm(np.asarray(t_a, dtype=float) - np.asarray(t_b, dtype=float)))


def backproject_pixel(intrinsics: CameraIntrinsics, u: float, v: float, d: float) -> np.ndarray:
    if not d > 0:
        raise InvalidDepthError(f"depth must be positive, got {d}")
    if not intrinsics.contains(u, v):
        raise OutOfBoundsError(f"pixel ({u}, {v}) outside {intrinsics.width}x{intrinsics.height} image")
    k = intrinsics
    return np.array([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, float(d)])


def backproject_pixels(intrinsics: CameraIntrinsics, uv, depth) -> np.ndarray:
    """Vectorized :func:`backproject_pixel` for (N, 2) pixels and N depths."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    d = np.asarray(depth, dtype=float).reshape(-1)
    if uv.shape[0] != d.shape[0]:
        raise GeometryError(f"{uv.shape[0]} pixels but {d.shape[0]} depths")
    if np.any(~(d > 0)):
        raise InvalidDepthError("depth must be positive for every pixel")
    if not np.all(intrinsics.contains(uv[:, 0], uv[:, 1])):
        raise OutOfBoundsError("pixel outside image")
    k = intrinsics
    return np.column_stack([(uv[:, 0] - k.cx) * d / k.fx, (uv[:, 1] - k.cy) * d / k.fy, d])


def backproject_depth(intrinsics: CameraIntrinsics, depth: np.ndarray, mask=None):
    """Lift every valid (nonzero) depth pixel. Returns ``(points, uv)``."""
    depth = np.asarray(depth, dtype=float)
    valid = depth > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    v, u = np.nonzero(valid)
    uv = np.column_stack([u, v])
    return backproject_pixels(intrinsics, uv, depth[v, u]), uv


def project_point(intrinsics: CameraIntrinsics, p) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in np.asarray(p, dtype=float).reshape(3))
    if not z > 0:
        raise BehindCameraError(f"point has z={z} <= 0")
    k = intrinsics
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy, z)


def project_points(intrinsics: CameraIntrinsics, points) -> np.ndarray:
    """Project (N, 3) camera-frame points to (N, 3) rows of ``(u, v, z)``."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    if np.any(~(z > 0)):
        raise BehindCameraError(f"{int(np.sum(~(z > 0)))} points at or behind the camera plane")
    k = intrinsics
    return np.column_stack([k.fx * p[:, 0] / z + k.cx, k.fy * p[:, 1] / z + k.cy, z])


@dataclass(frozen=True)
class BoundingBox:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise GeometryError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    @property
    def center(self) -> tuple[float, float]:
        return ((self.u_min + self.u_max) / 2.0, (self.v_min + self.v_max) / 2.0)

    def contains(self, other: BoundingBox) -> bool:
        return (
            self.u_min <= other.u_min
            and self.v_min <= other.v_min
            and self.u_max >= other.u_max
            and self.v_max >= other.v_max
        )


def _shift_into(lo: float, side: float, limit: float) -> float:
    if lo < 0:
        return 0.0
    if lo + side > limit:
        return limit - side
    return lo


def square_and_resize_box(box: BoundingBox, image_size, target_side: float):
    """Square a detection box without deforming it.

    The square has side ``max(width, height)`` and shares the box center. When
    it sticks out of the image it is shifted (never shrunk) back inside.

    Returns
    -------
    (BoundingBox, float)
        The square box and the resize factor ``target_side / side``.
    """
    w, h = image_size
    if box.u_max <= 0 or box.v_max <= 0 or box.u_min >= w or box.v_min >= h:
        raise GeometryError(f"box {box} does not intersect the {w}x{h} image")
    if target_side <= 0:
        raise GeometryError(f"target side must be positive, got {target_side}")
    side = max(box.width, box.height)
    if side > min(w, h):
        raise BoxTooLargeError(f"square side {side} exceeds image size {w}x{h}")
    cu, cv = box.center
    u0 = _shift_into(cu - side / 2.0, side, w)
    v0 = _shift_into(cv - side / 2.0, side, h)
    return BoundingBox(u0, v0, u0 + side, v0 + side), target_side / side

