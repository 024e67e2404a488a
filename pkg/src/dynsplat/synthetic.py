"""Ray-traced synthetic dynamic scenes with exact ground truth.

A scene is a checkered ground plane, static boxes and moving bodies (spheres
or boxes) seen by a camera sliding along a straight path. Shading is
Lambertian with one directional light and no shadows, so the static part of
every frame is exactly static.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .camera import CameraModel, look_at
from .data import Box3D, FrameRecord, SceneDataset, boxes_to_mask, write_manifest
from .errors import InvalidParameterError
from .field import SceneBounds

FEATURE_DIM = 3
GROUND_ID = 0


@dataclass
class StaticBox:
    center: tuple
    size: tuple
    color: tuple
    yaw: float = 0.0


@dataclass
class DynamicBody:
    """Moving sphere (``size`` = radius) or box (``size`` = extents).

    ``motion`` is ``"linear"`` (``start`` + ``velocity`` * seconds) or
    ``"circular"`` (around ``start`` in the xy plane with ``radius`` and
    ``angular_speed`` in rad/s, starting at angle ``phase``).
    """

    kind: str
    size: float | tuple
    color: tuple
    start: tuple
    motion: str = "linear"
    velocity: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    angular_speed: float = 0.0
    phase: float = 0.0

    def center_at(self, seconds: float) -> np.ndarray:
        start = np.asarray(self.start, dtype=np.float64)
        if self.motion == "linear":
            return start + np.asarray(self.velocity, dtype=np.float64) * seconds
        ang = self.phase + self.angular_speed * seconds
        return start + self.radius * np.array([math.cos(ang), math.sin(ang), 0.0])

    def box_at(self, seconds: float) -> Box3D:
        if self.kind == "sphere":
            size = np.full(3, 2.0 * float(self.size))
        else:
            size = np.asarray(self.size, dtype=np.float64)
        return Box3D(self.center_at(seconds), size)


@dataclass
class CameraPath:
    eye_start: tuple = (-0.5, -6.0, 4.0)
    eye_end: tuple = (0.5, -6.0, 4.0)
    target_start: tuple = (-0.3, 0.0, 0.5)
    target_end: tuple = (0.3, 0.0, 0.5)
    fx: float = 150.0
    fy: float = 150.0
    near: float = 0.1
    far: float = 100.0


@dataclass
class SyntheticSceneSpec:
    width: int = 128
    height: int = 96
    n_frames: int = 50
    frame_interval: float = 0.1
    ground_min: tuple = (-8.0, -8.0)
    ground_max: tuple = (8.0, 6.0)
    checker_size: float = 1.0
    ground_colors: tuple = ((0.62, 0.6, 0.52), (0.42, 0.47, 0.4))
    static_boxes: list = field(default_factory=list)
    dynamic_bodies: list = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    light_dir: tuple = (0.3, -0.5, 0.8)
    ambient: float = 0.35
    background: tuple = (0.55, 0.7, 0.9)
    noise_std: float = 0.0
    depth_fraction: float = 0.05
    prior_spacing: float = 0.1
    prior_jitter: float = 0.01
    smear_samples: int = 5

    def __post_init__(self):
        self.camera = self.camera if isinstance(self.camera, CameraPath) else CameraPath(**self.camera)
        self.static_boxes = [b if isinstance(b, StaticBox) else StaticBox(**b) for b in self.static_boxes]
        self.dynamic_bodies = [b if isinstance(b, DynamicBody) else DynamicBody(**b)
                               for b in self.dynamic_bodies]
        self.validate()

    def validate(self) -> None:
        if self.n_frames < 2:
            raise InvalidParameterError("n_frames must be at least 2")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be positive")
        if self.frame_interval <= 0:
            raise InvalidParameterError("frame_interval must be positive")
        if not 0.0 <= self.depth_fraction <= 1.0:
            raise InvalidParameterError("depth_fraction must lie in [0, 1]")
        if self.prior_spacing <= 0 or self.smear_samples < 1:
            raise InvalidParameterError("prior_spacing and smear_samples must be positive")
        for b in self.dynamic_bodies:
            if b.kind not in ("sphere", "box"):
                raise InvalidParameterError(f"unknown body kind {b.kind!r}")
            if b.motion not in ("linear", "circular"):
                raise InvalidParameterError(f"unknown motion {b.motion!r}")
        lo, hi = self.aabb()
        for b in self.dynamic_bodies:
            for s in self.timestamps():
                box = b.box_at(s)
                if np.any(box.center - box.size / 2 < lo) or np.any(box.center + box.size / 2 > hi):
                    raise InvalidParameterError("dynamic trajectory leaves the scene bounds")

    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_interval

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.ground_min[0], self.ground_min[1], -0.5])
        hi = np.array([self.ground_max[0], self.ground_max[1], 0.5])
        for b in self.static_boxes:
            c, s = np.asarray(b.center, dtype=float), np.asarray(b.size, dtype=float)
            r = np.linalg.norm(s[:2]) / 2
            lo = np.minimum(lo, c - [r, r, s[2] / 2])
            hi = np.maximum(hi, c + [r, r, s[2] / 2])
        return lo, hi + [0.0, 0.0, 2.0]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown scene spec keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidParameterError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SyntheticSceneSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidParameterError(f"cannot read scene spec {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidParameterError("scene spec must be a JSON object")
        return cls.from_dict(doc)


def moving_sphere_spec() -> SyntheticSceneSpec:
    """The bundled 50-frame, 96x128 moving-sphere scene."""
    text = resources.files("dynsplat").joinpath("scenes/moving_sphere.json").read_text()
    return SyntheticSceneSpec.from_dict(json.loads(text))


def camera_at(spec: SyntheticSceneSpec, frame: int) -> CameraModel:
    cp = spec.camera
    s = frame / (spec.n_frames - 1)
    eye = (1 - s) * np.asarray(cp.eye_start) + s * np.asarray(cp.eye_end)
    target = (1 - s) * np.asarray(cp.target_start) + s * np.asarray(cp.target_end)
    return CameraModel(fx=cp.fx, fy=cp.fy, cx=spec.width / 2, cy=spec.height / 2,
                       width=spec.width, height=spec.height,
                       world_to_camera=look_at(eye, target), near=cp.near, far=cp.far)


def feature_color(obj_id: int) -> np.ndarray:
    """Distinct constant feature vector per object identity."""
    hue = (obj_id * 0.618033988749895) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.9))


def _ray_box(origin, dirs, box: Box3D):
    """Hit distance and world normal for rays against an oriented box."""
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - box.center)
    d = dirs @ rot.T
    half = box.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    enter = np.nanmax(tmin, axis=1)
    leave = np.nanmin(tmax, axis=1)
    axis = np.nanargmax(tmin, axis=1)
    hit = (leave >= enter) & (enter > 0)
    dist = np.where(hit, enter, np.inf)
    local_n = np.zeros_like(d)
    rows = np.arange(len(d))
    local_n[rows, axis] = -np.sign(d[rows, axis])
    return dist, local_n @ rot  # rot is orthonormal: inverse rotation is rot.T


def _ray_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    s = (-b - root) / (2 * a)
    hit = (disc >= 0) & (s > 0)
    dist = np.where(hit, s, np.inf)
    pts = origin + dirs * np.where(hit, s, 0.0)[:, None]
    return dist, (pts - center) / radius


@dataclass
class TraceResult:
    rgb: np.ndarray
    depth: np.ndarray  # camera z, inf where nothing is hit
    obj_id: np.ndarray  # -1 where nothing is hit


def trace(spec: SyntheticSceneSpec, camera: CameraModel, seconds: float) -> TraceResult:
    """Ray-trace one frame; depth is camera-space z of the first hit."""
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    d_cam = np.stack([(us.ravel() - camera.cx) / camera.fx,
                      (vs.ravel() - camera.cy) / camera.fy, np.ones(us.size)], axis=1)
    dirs = d_cam @ camera.rotation  # rows of R^T d
    origin = camera.center
    n_pix = len(dirs)

    best = np.full(n_pix, np.inf)
    obj = np.full(n_pix, -1, dtype=np.int64)
    normal = np.zeros((n_pix, 3))
    albedo = np.zeros((n_pix, 3))

    def take(dist, nrm, oid, color):
        closer = dist < best
        best[closer] = dist[closer]
        obj[closer] = oid
        normal[closer] = nrm[closer] if nrm.ndim == 2 else nrm
        albedo[closer] = color[closer] if np.ndim(color) == 2 else color

    # ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -origin[2] / dirs[:, 2]
    pts = origin + dirs * np.where(np.isfinite(s), s, 0.0)[:, None]
    inside = ((s > 0) & (pts[:, 0] >= spec.ground_min[0]) & (pts[:, 0] <= spec.ground_max[0])
              & (pts[:, 1] >= spec.ground_min[1]) & (pts[:, 1] <= spec.ground_max[1]))
    parity = (np.floor(pts[:, 0] / spec.checker_size) + np.floor(pts[:, 1] / spec.checker_size)) % 2
    colors = np.where(parity[:, None] == 0, spec.ground_colors[0], spec.ground_colors[1])
    take(np.where(inside, s, np.inf), np.array([0.0, 0.0, 1.0]), GROUND_ID, colors)

    for k, b in enumerate(spec.static_boxes):
        dist, nrm = _ray_box(origin, dirs, Box3D(b.center, b.size, b.yaw))
        take(dist, nrm, 1 + k, np.asarray(b.color, dtype=np.float64))

    base = 1 + len(spec.static_boxes)
    for k, body in enumerate(spec.dynamic_bodies):
        if body.kind == "sphere":
            dist, nrm = _ray_sphere(origin, dirs, body.center_at(seconds), float(body.size))
        else:
            dist, nrm = _ray_box(origin, dirs, body.box_at(seconds))
        take(dist, nrm, base + k, np.asarray(body.color, dtype=np.float64))

    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = spec.ambient + (1.0 - spec.ambient) * np.maximum(normal @ light, 0.0)
    rgb = np.where((obj >= 0)[:, None], albedo * shade[:, None], np.asarray(spec.background))
    return TraceResult(rgb.reshape(h, w, 3), best.reshape(h, w), obj.reshape(h, w))


def _sample_rect(rng, lo, hi, spacing):
    area = (hi[0] - lo[0]) * (hi[1] - lo[1])
    n = max(1, int(round(area / spacing ** 2)))
    return np.column_stack([rng.uniform(lo[0], hi[0], n), rng.uniform(lo[1], hi[1], n)])


def _sample_box(rng, box: Box3D, spacing):
    pts = []
    half = box.size / 2
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        for sign in (-1.0, 1.0):
            uv = _sample_rect(rng, (-half[a], -half[b]), (half[a], half[b]), spacing)
            p = np.zeros((len(uv), 3))
            p[:, a], p[:, b], p[:, axis] = uv[:, 0], uv[:, 1], sign * half[axis]
            pts.append(p)
    local = np.concatenate(pts)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return box.center + local @ rot.T


def _sample_sphere(rng, center, radius, spacing):
    n = max(8, int(round(4 * math.pi * radius ** 2 / spacing ** 2)))
    v = rng.normal(size=(n, 3))
    return center + radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def point_prior(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Surface samples of the static geometry plus moving bodies smeared along their paths."""
    parts = []
    g = _sample_rect(rng, spec.ground_min, spec.ground_max, spec.prior_spacing)
    parts.append(np.column_stack([g, np.zeros(len(g))]))
    for b in spec.static_boxes:
        parts.append(_sample_box(rng, Box3D(b.center, b.size, b.yaw), spec.prior_spacing))
    times = spec.timestamps()
    sweep = np.linspace(times[0], times[-1], spec.smear_samples) if spec.smear_samples > 1 else times[:1]
    for body in spec.dynamic_bodies:
        for s in sweep:
            if body.kind == "sphere":
                parts.append(_sample_sphere(rng, body.center_at(s), float(body.size), spec.prior_spacing))
            else:
                parts.append(_sample_box(rng, body.box_at(s), spec.prior_spacing))
    pts = np.concatenate(parts)
    return pts + rng.normal(scale=spec.prior_jitter, size=pts.shape)


def synthesize(spec: SyntheticSceneSpec, out_dir, seed: int = 0) -> SceneDataset:
    """Render the dataset, its manifest and a ground-truth sidecar into ``out_dir``."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    frames, gt_frames = [], []
    for i, seconds in enumerate(spec.timestamps()):
        cam = camera_at(spec, i)
        res = trace(spec, cam, float(seconds))
        rgb = res.rgb
        if spec.noise_std > 0:
            rgb = rgb + rng.normal(scale=spec.noise_std, size=rgb.shape)
        stem = f"{i:04d}"
        io.write_png(out / "images" / f"{stem}.png", rgb)

        hit_v, hit_u = np.nonzero(res.obj_id >= 0)
        n_depth = int(round(spec.depth_fraction * len(hit_u)))
        pick = np.sort(rng.choice(len(hit_u), size=n_depth, replace=False))
        samples = np.column_stack([hit_u[pick], hit_v[pick], res.depth[hit_v[pick], hit_u[pick]]])
        io.write_raw(out / "depth" / f"{stem}.bin", samples.reshape(-1, 3))

        feats = np.zeros((cam.height, cam.width, FEATURE_DIM))
        for oid in np.unique(res.obj_id[res.obj_id >= 0]):
            feats[res.obj_id == oid] = feature_color(int(oid))
        io.write_raw(out / "features" / f"{stem}.bin", feats)

        boxes = [b.box_at(float(seconds)) for b in spec.dynamic_bodies]
        io.write_mask(out / "masks" / f"{stem}.png", boxes_to_mask(boxes, cam))

        frames.append(FrameRecord(
            image=out / "images" / f"{stem}.png", camera=cam, timestamp=float(seconds),
            time=float(seconds / spec.timestamps()[-1]),
            depth=out / "depth" / f"{stem}.bin", features=out / "features" / f"{stem}.bin",
            mask=out / "masks" / f"{stem}.png", boxes=boxes,
        ))
        gt_frames.append({
            "timestamp": float(seconds),
            "centers": [b.center_at(float(seconds)).tolist() for b in spec.dynamic_bodies],
            "boxes": [b.to_dict() for b in boxes],
        })

    points = point_prior(spec, rng)
    io.write_ply(out / "points.ply", points)
    lo, hi = spec.aabb()
    dataset = SceneDataset(frames=frames, root=out.resolve(),
                           points=points.astype(np.float32).astype(np.float64),
                           pointcloud=out / "points.ply", bounds=SceneBounds(lo, hi),
                           time_range=(float(spec.timestamps()[0]), float(spec.timestamps()[-1])))
    write_manifest(dataset, out)
    sidecar = {
        "spec": spec.to_dict(),
        "seed": seed,
        "dynamic_ids": [1 + len(spec.static_boxes) + k for k in range(len(spec.dynamic_bodies))],
        "frames": gt_frames,
    }
    io.atomic_write(out / "gt.json", (json.dumps(sidecar, indent=1, sort_keys=True) + "\n").encode())
    return dataset


def dynamic_region_distance(spec: SyntheticSceneSpec, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest dynamic body over the whole sequence.

    Zero means the point lies inside some body at some frame.
    """
    points = np.asarray(points, dtype=np.float64)
    best = np.full(len(points), np.inf)
    for body in spec.dynamic_bodies:
        for s in spec.timestamps():
            if body.kind == "sphere":
                d = np.linalg.norm(points - body.center_at(s), axis=1) - float(body.size)
            else:
                box = body.box_at(s)
                q = np.abs(points - box.center) - box.size / 2
                d = np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
            best = np.minimum(best, np.maximum(d, 0.0))
    return best
