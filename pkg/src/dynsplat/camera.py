"""Pinhole camera model shared by the renderer, the dataset and initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


@dataclass
class CameraModel:
    """Pinhole camera with an OpenCV-style frame (x right, y down, z forward).

    Pixel ``(u, v)`` covers ``[u, u+1) x [v, v+1)``; its center sits at
    ``(u + 0.5, v + 0.5)``. A camera-space point ``p`` lands at
    ``(fx * p.x / p.z + cx, fy * p.y / p.z + cy)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        self.width = int(self.width)
        self.height = int(self.height)
        self.validate()

    def validate(self) -> None:
        vals = (self.fx, self.fy, self.cx, self.cy, self.near, self.far)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidParameterError("camera intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")
        if not (0 < self.near < self.far):
            raise InvalidParameterError("need 0 < near < far")
        w2c = self.world_to_camera
        if w2c.shape != (4, 4) or not np.all(np.isfinite(w2c)):
            raise InvalidParameterError("world_to_camera must be a finite 4x4 matrix")
        rot = w2c[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-8:
            raise InvalidParameterError("world_to_camera rotation block is not orthonormal")
        if np.max(np.abs(w2c[3] - [0, 0, 0, 1])) > 1e-12:
            raise InvalidParameterError("world_to_camera must be a rigid transform")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns ``(pixels (N, 2), depth (N,))``."""
        cam = self.to_camera(np.asarray(points, dtype=np.float64))
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = np.stack([self.fx * cam[:, 0] / z + self.cx,
                           self.fy * cam[:, 1] / z + self.cy], axis=1)
        return px, z

    def in_frustum(self, points: np.ndarray) -> np.ndarray:
        px, z = self.project_points(points)
        ok = (z > self.near) & (z < self.far)
        ok &= (px[:, 0] >= 0) & (px[:, 0] < self.width)
        ok &= (px[:, 1] >= 0) & (px[:, 1] < self.height)
        return ok

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
            "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        required = {"fx", "fy", "cx", "cy", "width", "height", "world_to_camera"}
        missing = required - set(d)
        if missing:
            raise InvalidParameterError(f"camera is missing keys {sorted(missing)}")
        unknown = set(d) - required - {"near", "far"}
        if unknown:
            raise InvalidParameterError(f"camera has unknown keys {sorted(unknown)}")
        try:
            return cls(
                fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                width=int(d["width"]), height=int(d["height"]),
                world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
                near=float(d.get("near", 0.01)), far=float(d.get("far", 1000.0)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidParameterError):
                raise
            raise InvalidParameterError(f"malformed camera: {exc}") from exc


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``.

    ``up`` is a world direction that maps to image-up (camera -y).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return w2c
