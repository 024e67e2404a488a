"""Scene datasets: JSON manifests of posed, timestamped frames."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import io
from .camera import CameraModel
from .errors import InvalidParameterError, LoadError
from .field import SceneBounds

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

_FRAME_KEYS = {"image", "camera", "timestamp", "depth", "features", "mask", "boxes"}


@dataclass
class Box3D:
    """Box with full extents ``size``, rotated by ``yaw`` radians about +z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        if not (np.isfinite(self.center).all() and np.isfinite(self.size).all()
                and math.isfinite(self.yaw)):
            raise InvalidParameterError("box parameters must be finite")
        if np.any(self.size <= 0):
            raise InvalidParameterError("box sizes must be positive")

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return self.center + (signs * 0.5 * self.size) @ rot.T

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["size"], d.get("yaw", 0.0))


# corner index pairs forming the 12 box edges (corners ordered by sign bits x, y, z)
_BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


def _box_image_vertices(box: Box3D, camera: CameraModel) -> np.ndarray:
    """Pixel coordinates of the box clipped to the near plane."""
    cam = camera.to_camera(box.corners())
    z = cam[:, 2]
    near = camera.near
    pts = [cam[i] for i in range(8) if z[i] >= near]
    for a, b in _BOX_EDGES:
        if (z[a] - near) * (z[b] - near) < 0:
            s = (near - z[a]) / (z[b] - z[a])
            pts.append(cam[a] + s * (cam[b] - cam[a]))
    if not pts:
        return np.zeros((0, 2))
    pts = np.array(pts)
    return np.stack([camera.fx * pts[:, 0] / pts[:, 2] + camera.cx,
                     camera.fy * pts[:, 1] / pts[:, 2] + camera.cy], axis=1)


def boxes_to_mask(boxes, camera: CameraModel) -> np.ndarray:
    """Union of the convex hulls of each box's projection, tested at pixel centers."""
    mask = np.zeros((camera.height, camera.width), dtype=bool)
    xs, ys = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=1)
    for box in boxes:
        box = box if isinstance(box, Box3D) else Box3D.from_dict(box)
        verts = _box_image_vertices(box, camera)
        if len(verts) < 3:
            continue
        try:
            hull = ConvexHull(verts)
        except QhullError:
            continue  # degenerate (edge-on) projection covers no area
        scale = max(1.0, float(np.abs(verts).max()))
        inside = np.all(pix @ hull.equations.T <= 1e-9 * scale, axis=1)
        mask |= inside.reshape(mask.shape)
    return mask


@dataclass
class FrameRecord:
    image: Path
    camera: CameraModel
    timestamp: float
    time: float = 0.0  # normalized to [0, 1] over the sequence
    depth: Path | None = None
    features: Path | None = None
    mask: Path | None = None
    boxes: list[Box3D] | None = None

    def load_image(self) -> np.ndarray:
        return io.read_png(self.image)

    def load_depth(self) -> np.ndarray:
        """Sparse depth samples as (M, 3) rows of (u, v, meters)."""
        if self.depth is None:
            return np.zeros((0, 3))
        samples = io.read_raw(self.depth)
        return samples.reshape(-1, 3)

    def load_features(self) -> np.ndarray | None:
        return None if self.features is None else io.read_raw(self.features)

    def load_mask(self) -> np.ndarray | None:
        """Dynamic-region mask from the mask file, else from the boxes, else None."""
        if self.mask is not None:
            return io.read_mask(self.mask)
        if self.boxes is not None:
            return boxes_to_mask(self.boxes, self.camera)
        return None

    @property
    def has_mask(self) -> bool:
        return self.mask is not None or self.boxes is not None


@dataclass
class SceneDataset:
    frames: list[FrameRecord]
    root: Path
    points: np.ndarray | None = None
    pointcloud: Path | None = None
    bounds: SceneBounds | None = None
    time_range: tuple[float, float] = (0.0, 1.0)
    indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.indices:
            self.indices = list(range(len(self.frames)))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> FrameRecord:
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def cameras(self) -> list[CameraModel]:
        return [f.camera for f in self.frames]

    @property
    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])

    def subset(self, positions) -> "SceneDataset":
        positions = list(positions)
        return replace(self, frames=[self.frames[i] for i in positions],
                       indices=[self.indices[i] for i in positions])

    def normalize_time(self, timestamp: float) -> float:
        t0, t1 = self.time_range
        return 0.0 if t1 <= t0 else (float(timestamp) - t0) / (t1 - t0)


def _resolve(root: Path, value, index: int, key: str) -> Path:
    if not isinstance(value, str):
        raise LoadError(f"{key} must be a path string", index)
    path = (root / value).resolve()
    if not path.is_file():
        raise LoadError(f"{key} file not found: {value}", index)
    return path


def load_manifest(path) -> SceneDataset:
    """Parse and validate a manifest; frame payloads load lazily."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise LoadError("manifest must be a JSON object")
    if doc.get("version") != MANIFEST_VERSION:
        raise LoadError(f"unsupported manifest version {doc.get('version')!r}")
    root = path.parent.resolve()
    raw_frames = doc.get("frames")
    if not isinstance(raw_frames, list) or not raw_frames:
        raise LoadError("manifest has no frames")

    frames = []
    for i, rec in enumerate(raw_frames):
        if not isinstance(rec, dict):
            raise LoadError("frame record must be an object", i)
        unknown = set(rec) - _FRAME_KEYS
        if unknown:
            raise LoadError(f"unknown frame keys {sorted(unknown)}", i)
        try:
            camera = CameraModel.from_dict(rec["camera"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"malformed camera: {exc}", i) from exc
        ts = rec.get("timestamp")
        if not isinstance(ts, (int, float)) or not math.isfinite(ts):
            raise LoadError("timestamp must be a finite number", i)
        if frames and ts < frames[-1].timestamp:
            raise LoadError("timestamps are not sorted", i)
        boxes = None
        if rec.get("boxes") is not None:
            try:
                boxes = [Box3D.from_dict(b) for b in rec["boxes"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise LoadError(f"malformed box: {exc}", i) from exc
        frames.append(FrameRecord(
            image=_resolve(root, rec.get("image"), i, "image"),
            camera=camera,
            timestamp=float(ts),
            depth=_resolve(root, rec["depth"], i, "depth") if rec.get("depth") else None,
            features=_resolve(root, rec["features"], i, "features") if rec.get("features") else None,
            mask=_resolve(root, rec["mask"], i, "mask") if rec.get("mask") else None,
            boxes=boxes,
        ))

    t0, t1 = frames[0].timestamp, frames[-1].timestamp
    for f in frames:
        f.time = 0.0 if t1 <= t0 else (f.timestamp - t0) / (t1 - t0)

    points = cloud = None
    if doc.get("pointcloud"):
        cloud = _resolve(root, doc["pointcloud"], None, "pointcloud")
        points = io.read_points(cloud)
    bounds = None
    if doc.get("bounds") is not None:
        try:
            bounds = SceneBounds(doc["bounds"]["aabb_min"], doc["bounds"]["aabb_max"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"malformed bounds: {exc}") from exc
    return SceneDataset(frames=frames, root=root, points=points, pointcloud=cloud,
                        bounds=bounds, time_range=(t0, t1))


def _rel(path: Path | None, root: Path) -> str | None:
    if path is None:
        return None
    path = Path(path).resolve()
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return str(path)


def manifest_dict(dataset: SceneDataset, root: Path) -> dict:
    root = Path(root).resolve()
    frames = []
    for f in dataset.frames:
        rec = {"image": _rel(f.image, root), "camera": f.camera.to_dict(), "timestamp": f.timestamp}
        for key in ("depth", "features", "mask"):
            if getattr(f, key) is not None:
                rec[key] = _rel(getattr(f, key), root)
        if f.boxes is not None:
            rec["boxes"] = [b.to_dict() for b in f.boxes]
        frames.append(rec)
    doc = {"version": MANIFEST_VERSION, "frames": frames}
    if dataset.pointcloud is not None:
        doc["pointcloud"] = _rel(dataset.pointcloud, root)
    if dataset.bounds is not None:
        doc["bounds"] = {"aabb_min": dataset.bounds.aabb_min.tolist(),
                         "aabb_max": dataset.bounds.aabb_max.tolist()}
    return doc


def write_manifest(dataset: SceneDataset, path) -> Path:
    """Write ``dataset`` as a manifest; file paths are stored relative to it."""
    path = Path(path)
    if path.is_dir() or not path.suffix:
        path = path / MANIFEST_NAME
    doc = manifest_dict(dataset, path.parent)
    io.atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())
    return path


def split_train_test(dataset: SceneDataset, every_nth: int = 10) -> tuple[SceneDataset, SceneDataset]:
    """Frames whose index is a multiple of ``every_nth`` form the test split."""
    if every_nth < 2:
        raise InvalidParameterError("every_nth must be at least 2")
    idx = np.arange(len(dataset))
    test = idx % every_nth == 0
    return dataset.subset(np.flatnonzero(~test)), dataset.subset(np.flatnonzero(test))
