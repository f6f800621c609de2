"""On-disk formats.

depth      16-bit single-channel PNG, millimeters, 0 = missing
mask       8-bit single-channel PNG, nonzero = object
features   "FMAP" | u16 version | u32 H, W, F | H*W*F float32 (v, u, channel) | u32 CRC32 of the floats,
           all little-endian
intrinsics JSON {"fx", "fy", "cx", "cy", "width", "height"}
pose       JSON {"rotation": 9 numbers row-major, "translation": 3 numbers (m), "frame": "A_to_Q"}
matches    CSV "uA,vA,uQ,vQ,dist", distances with 6 decimals
model      JSON {"points_path": XYZ text file (m), "diameter": m, "symmetries": [9-number rotations]}

Every loader raises a :class:`~relpose.errors.MalformedFileError` subclass
naming the file and the offending field.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ChecksumError, DimensionMismatchError, InputFormatError, MalformedFileError, RelPoseError
from .geometry import CameraIntrinsics, RigidTransform
from .losses import MatchSupervision
from .matching import MatchSet
from .metrics import ObjectModel

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sHIII")
_CRC = struct.Struct("<I")
MATCH_HEADER = ["uA", "vA", "uQ", "vQ", "dist"]
POSE_FRAME = "A_to_Q"


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise MalformedFileError(path, "file", str(exc)) from exc


def _read_json(path):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(path, "json", str(exc)) from exc


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _number(data, key, path):
    value = data.get(key) if isinstance(data, dict) else None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedFileError(path, key, f"expected a finite number, got {value!r}")
    return value


def _numbers(data, key, n, path):
    value = data.get(key) if isinstance(data, dict) else None
    if not isinstance(value, list) or len(value) != n:
        raise MalformedFileError(path, key, f"expected a list of {n} numbers")
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise MalformedFileError(path, key, f"non-numeric entry {x!r}")
    return [float(x) for x in value]


# -- images -----------------------------------------------------------------

def _read_png(path, modes):
    try:
        with Image.open(_io.BytesIO(_read_bytes(path))) as img:
            if img.format != "PNG":
                raise MalformedFileError(path, "format", f"expected PNG, got {img.format}")
            if img.mode not in modes:
                raise MalformedFileError(path, "mode", f"expected one of {modes}, got {img.mode}")
            return np.array(img)
    except RelPoseError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types on corrupt data
        raise MalformedFileError(path, "png", str(exc)) from exc


def save_depth_mm(path, depth_mm: np.ndarray) -> None:
    arr = np.asarray(depth_mm)
    if arr.ndim != 2 or arr.dtype != np.uint16:
        raise InputFormatError("depth in millimeters must be a 2D uint16 array")
    Image.fromarray(arr).save(path, format="PNG")


def load_depth_mm(path) -> np.ndarray:
    arr = _read_png(path, ("I;16", "I"))
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise MalformedFileError(path, "depth", "values outside the 16-bit range")
    return arr.astype(np.uint16)


def save_depth(path, depth_m: np.ndarray) -> None:
    """Store a metric depth map, rounding to whole millimeters."""
    d = np.asarray(depth_m, dtype=float)
    if d.ndim != 2 or np.any(~np.isfinite(d)) or np.any(d < 0):
        raise InputFormatError("depth must be a finite, nonnegative 2D array")
    mm = np.rint(d * 1000.0)
    if mm.max(initial=0) > 65535:
        raise InputFormatError("depth exceeds 65.535 m, the 16-bit millimeter range")
    save_depth_mm(path, mm.astype(np.uint16))


def load_depth(path) -> np.ndarray:
    """Depth map in meters (0 = missing)."""
    return load_depth_mm(path).astype(float) / 1000.0


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InputFormatError("mask must be 2D")
    Image.fromarray(np.where(m != 0, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    return _read_png(path, ("L", "1")) != 0


# -- feature maps ---------------------------------------------------------------

def encode_feature_map(fmap: np.ndarray) -> bytes:
    f = np.asarray(fmap)
    if f.ndim != 3 or min(f.shape) < 1:
        raise InputFormatError(f"feature map must be (H, W, F) with F >= 1, got {f.shape}")
    payload = np.ascontiguousarray(f, dtype="<f4").tobytes()
    h, w, c = f.shape
    return _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, h, w, c) + payload + _CRC.pack(zlib.crc32(payload))


def decode_feature_map(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < _FMAP_HEADER.size:
        raise MalformedFileError(path, "header", f"file has {len(data)} bytes, header needs {_FMAP_HEADER.size}")
    magic, version, h, w, c = _FMAP_HEADER.unpack_from(data)
    if magic != FMAP_MAGIC:
        raise MalformedFileError(path, "magic", f"expected {FMAP_MAGIC!r}, got {magic!r}")
    if version != FMAP_VERSION:
        raise MalformedFileError(path, "version", f"unsupported version {version}")
    if min(h, w, c) < 1:
        raise MalformedFileError(path, "header", f"invalid dimensions {h}x{w}x{c}")
    n = 4 * h * w * c
    expected = _FMAP_HEADER.size + n + _CRC.size
    if len(data) != expected:
        raise MalformedFileError(
            path, "header", f"dimensions {h}x{w}x{c} need {expected} bytes, file has {len(data)}"
        )
    payload = data[_FMAP_HEADER.size : _FMAP_HEADER.size + n]
    (crc,) = _CRC.unpack_from(data, _FMAP_HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(path, "crc32", "payload checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


def save_feature_map(path, fmap: np.ndarray) -> None:
    Path(path).write_bytes(encode_feature_map(fmap))


def load_feature_map(path) -> np.ndarray:
    return decode_feature_map(_read_bytes(path), path)


# -- intrinsics and poses -------------------------------------------------------

def intrinsics_to_dict(k: CameraIntrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}


def save_intrinsics(path, k: CameraIntrinsics) -> None:
    _write_json(path, intrinsics_to_dict(k))


def load_intrinsics(path) -> CameraIntrinsics:
    data = _read_json(path)
    values = {key: _number(data, key, path) for key in ("fx", "fy", "cx", "cy", "width", "height")}
    for key in ("width", "height"):
        if values[key] != int(values[key]):
            raise MalformedFileError(path, key, "must be an integer")
        values[key] = int(values[key])
    try:
        return CameraIntrinsics(**values)
    except RelPoseError as exc:
        raise MalformedFileError(path, "intrinsics", str(exc)) from exc


def save_pose(path, t: RigidTransform, frame: str = POSE_FRAME) -> None:
    _write_json(path, {"rotation": t.rotation.ravel().tolist(), "translation": t.translation.tolist(),
                       "frame": frame})


def load_pose(path, frame: str | None = POSE_FRAME) -> RigidTransform:
    data = _read_json(path)
    rot = _numbers(data, "rotation", 9, path)
    trans = _numbers(data, "translation", 3, path)
    if frame is not None and data.get("frame") != frame:
        raise MalformedFileError(path, "frame", f"expected {frame!r}, got {data.get('frame')!r}")
    try:
        return RigidTransform(np.reshape(rot, (3, 3)), trans)
    except RelPoseError as exc:
        raise MalformedFileError(path, "rotation", str(exc)) from exc


# -- matches ---------------------------------------------------------------------

def save_matches(path, matches: MatchSet) -> None:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MATCH_HEADER)
    for (ua, va), (uq, vq), d in zip(matches.coords_a, matches.coords_q, matches.distances):
        writer.writerow([int(ua), int(va), int(uq), int(vq), f"{d:.6f}"])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_matches(path) -> MatchSet:
    try:
        text = _read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFileError(path, "encoding", str(exc)) from exc
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows or rows[0] != MATCH_HEADER:
        raise MalformedFileError(path, "header", f"expected {','.join(MATCH_HEADER)}")
    coords, dists = [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise MalformedFileError(path, f"row {line}", f"expected 5 columns, got {len(row)}")
        try:
            coords.append([int(x) for x in row[:4]])
            dists.append(float(row[4]))
        except ValueError as exc:
            raise MalformedFileError(path, f"row {line}", str(exc)) from exc
    c = np.array(coords, dtype=np.int64).reshape(-1, 4)
    return MatchSet(c[:, :2], c[:, 2:], np.array(dists))


def save_supervision(path, sup: MatchSupervision, distances=None) -> None:
    d = np.zeros(len(sup)) if distances is None else distances
    save_matches(path, MatchSet(sup.coords_a, sup.coords_q, d))


def load_supervision(path) -> MatchSupervision:
    m = load_matches(path)
    try:
        return MatchSupervision(m.coords_a, m.coords_q)
    except RelPoseError as exc:
        raise MalformedFileError(path, "pairs", str(exc)) from exc


# -- object models ---------------------------------------------------------------

def save_object_model(path, model: ObjectModel, points_name: str | None = None) -> None:
    """Write the model JSON and its XYZ point file (next to it)."""
    path = Path(path)
    points_name = points_name or path.with_suffix(".xyz").name
    for s in model.symmetries:
        if np.any(s.translation != 0):
            raise InputFormatError("the model format stores rotation-only symmetries")
    lines = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in model.points.tolist())
    (path.parent / points_name).write_text(lines, encoding="utf-8")
    _write_json(path, {
        "points_path": points_name,
        "diameter": model.diameter,
        "symmetries": [s.rotation.ravel().tolist() for s in model.symmetries],
    })


def load_object_model(path) -> ObjectModel:
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("points_path"), str):
        raise MalformedFileError(path, "points_path", "missing or not a string")
    points_path = path.parent / data["points_path"]
    diameter = _number(data, "diameter", path)
    syms_raw = data.get("symmetries")
    if not isinstance(syms_raw, list):
        raise MalformedFileError(path, "symmetries", "expected a list of 9-number rotations")
    syms = []
    for i, s in enumerate(syms_raw):
        rot = _numbers({"s": s}, "s", 9, f"{path} symmetries[{i}]")
        try:
            syms.append(RigidTransform(np.reshape(rot, (3, 3)), np.zeros(3)))
        except RelPoseError as exc:
            raise MalformedFileError(path, f"symmetries[{i}]", str(exc)) from exc
    try:
        text = _read_bytes(points_path).decode("utf-8")
        points = np.array([[float(v) for v in line.split()] for line in text.splitlines() if line.strip()])
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedFileError(points_path, "points", str(exc)) from exc
    if points.ndim != 2 or points.shape[1] != 3:
        raise MalformedFileError(points_path, "points", "expected 3 numbers per line")
    try:
        return ObjectModel(points, diameter, syms)
    except RelPoseError as exc:
        raise MalformedFileError(path, "diameter", str(exc)) from exc


# -- manifests --------------------------------------------------------------------

VIEW_FIELDS = ("depth", "mask", "features", "intrinsics")


@dataclass
class ScenePairManifest:
    """Resolved file paths of one anchor/query pair."""

    anchor: dict
    query: dict
    model: Path | None = None
    gt_pose: Path | None = None
    gt_matches: Path | None = None
    anchor_object_pose: Path | None = None
    root: Path = Path(".")

    def to_json_dict(self) -> dict:
        def rel(p):
            return Path(os.path.relpath(p, self.root)).as_posix()

        out = {"anchor": {k: rel(v) for k, v in self.anchor.items()},
               "query": {k: rel(v) for k, v in self.query.items()}}
        for key in ("model", "gt_pose", "gt_matches", "anchor_object_pose"):
            if getattr(self, key) is not None:
                out[key] = rel(getattr(self, key))
        return out


def save_manifest(path, manifest: ScenePairManifest) -> None:
    _write_json(path, manifest.to_json_dict())


def load_manifest(path) -> ScenePairManifest:
    path = Path(path)
    data = _read_json(path)
    root = path.parent
    if not isinstance(data, dict):
        raise MalformedFileError(path, "manifest", "expected a JSON object")
    views = {}
    for view in ("anchor", "query"):
        entry = data.get(view)
        if not isinstance(entry, dict):
            raise MalformedFileError(path, view, "missing view section")
        resolved = {}
        for key in VIEW_FIELDS:
            if not isinstance(entry.get(key), str):
                raise MalformedFileError(path, f"{view}.{key}", "missing path")
            resolved[key] = root / entry[key]
            if not resolved[key].exists():
                raise MalformedFileError(path, f"{view}.{key}", f"file {resolved[key]} does not exist")
        views[view] = resolved
    optional = {}
    for key in ("model", "gt_pose", "gt_matches", "anchor_object_pose"):
        value = data.get(key)
        if value is None:
            optional[key] = None
            continue
        if not isinstance(value, str) or not (root / value).exists():
            raise MalformedFileError(path, key, f"file {value!r} does not exist")
        optional[key] = root / value
    return ScenePairManifest(views["anchor"], views["query"], root=root, **optional)


@dataclass
class LoadedView:
    depth: np.ndarray
    mask: np.ndarray
    features: np.ndarray
    intrinsics: CameraIntrinsics


def load_view(files: dict) -> LoadedView:
    view = LoadedView(
        depth=load_depth(files["depth"]),
        mask=load_mask(files["mask"]),
        features=load_feature_map(files["features"]),
        intrinsics=load_intrinsics(files["intrinsics"]),
    )
    shape = view.intrinsics.shape
    for name, arr in (("depth", view.depth), ("mask", view.mask), ("features", view.features)):
        if arr.shape[:2] != shape:
            raise DimensionMismatchError(files[name], "shape",
                                         f"{arr.shape[:2]} does not match intrinsics {shape}")
    return view
