"""Canonical Gaussian set: covariance assembly, SH color, initialization and density control."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraModel
from .errors import EmptyInitializationError, InvalidParameterError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

MAX_SH_DEGREE = 3


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def inverse_sigmoid(p):
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


@dataclass
class GaussianSet:
    """Canonical per-Gaussian attributes.

    Attributes:
        positions: (N, 3) world coordinates in meters.
        log_scales: (N, 3) per-axis log scale.
        rotations: (N, 4) unit quaternions, (w, x, y, z).
        opacity_logits: (N,) opacity before the sigmoid.
        sh_coeffs: (N, (k+1)^2, 3) spherical-harmonic color coefficients.
        sh_degree: maximum SH degree k.
        active_sh_degree: degree currently used for evaluation, in [0, k].
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int = 3
    active_sh_degree: int = 0

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")

    def __post_init__(self):
        for name in self.PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.validate()

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def validate(self) -> None:
        n = self.positions.shape[0]
        k = num_sh_coeffs(self.sh_degree)
        expected = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "opacity_logits": (n,), "sh_coeffs": (n, k, 3),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {shape}")
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise InvalidParameterError(f"sh_degree must be in [0, {MAX_SH_DEGREE}]")
        if not 0 <= self.active_sh_degree <= self.sh_degree:
            raise InvalidParameterError("active_sh_degree must be in [0, sh_degree]")

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "GaussianSet":
        return replace(self, **{name: getattr(self, name).copy() for name in self.PARAM_NAMES})

    def subset(self, index) -> "GaussianSet":
        return replace(self, **{name: getattr(self, name)[index] for name in self.PARAM_NAMES})

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def covariances(self) -> np.ndarray:
        return build_covariances(self.log_scales, self.rotations)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def rotmat_grad_to_quat(q: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """Backpropagate dL/dR (N, 3, 3) through ``quat_to_rotmat`` including normalization."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = grad_rot
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gq = np.stack([gw, gx, gy, gz], axis=1)
    return (gq - qn * np.sum(qn * gq, axis=1, keepdims=True)) / norm


def build_covariance(log_scale, rotation) -> np.ndarray:
    """Covariance ``R S S^T R^T`` of one Gaussian, with ``S = diag(exp(log_scale))``."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if log_scale.shape != (3,) or rotation.shape != (4,):
        raise InvalidParameterError("expected a 3-vector log-scale and a 4-vector quaternion")
    return build_covariances(log_scale[None], rotation[None])[0]


def build_covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    if not (np.all(np.isfinite(log_scales)) and np.all(np.isfinite(rotations))):
        raise InvalidParameterError("covariance factors must be finite")
    if np.any(np.linalg.norm(rotations, axis=-1) == 0):
        raise InvalidParameterError("zero quaternion")
    m = quat_to_rotmat(rotations) * np.exp(log_scales)[:, None, :]
    cov = m @ np.swapaxes(m, 1, 2)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis (3DGS sign convention) at unit directions (N, 3) -> (N, (degree+1)^2)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], num_sh_coeffs(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[:, 4] = SH_C2[0] * xy
        out[:, 5] = SH_C2[1] * yz
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * xz
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * xy * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivative of each basis function w.r.t. the direction components, (N, K, 3).

    The basis is treated as a polynomial in (x, y, z); projecting onto the
    unit sphere is the caller's job.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1 + zero
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def eval_sh(sh_coeffs, view_dir, degree: int) -> np.ndarray:
    """RGB from SH coefficients: ``max(basis . coeffs + 0.5, 0)``.

    Accepts a single Gaussian (``sh_coeffs`` of shape (K, 3) or flat 3K,
    ``view_dir`` a 3-vector) or a batch ((N, K, 3) with (N, 3) directions).
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    single = sh.ndim < 3
    if sh.ndim == 1:
        sh = sh.reshape(-1, 3)
    if single:
        sh = sh[None]
    raw = sh_raw(sh, view_dir, degree)
    rgb = np.maximum(raw, 0.0)
    return rgb[0] if single else rgb


def sh_raw(sh: np.ndarray, dirs, degree: int) -> np.ndarray:
    k = num_sh_coeffs(degree)
    if sh.shape[1] < k:
        raise InvalidParameterError(f"degree {degree} needs {k} coefficients, got {sh.shape[1]}")
    basis = sh_basis(dirs, degree)
    return np.einsum("nk,nkc->nc", basis, sh[:, :k, :]) + 0.5


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb) - 0.5) / SH_C0


def voxel_downsample(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """One centroid per occupied voxel, sorted by voxel key.

    Voxels are anchored at the per-axis minimum of the cloud. Points are
    sorted within each voxel before summation, so the result is bit-identical
    under any permutation of the input.
    """
    pts = np.asarray(points, dtype=np.float64)
    keys = np.floor((pts - pts.min(axis=0)) / voxel_size).astype(np.int64)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, pts = keys[order], pts[order]
    new_group = np.ones(len(pts), dtype=bool)
    new_group[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.append(starts, len(pts)))
    return np.add.reduceat(pts, starts, axis=0) / counts[:, None]


def init_from_points(
    points: np.ndarray,
    cameras: Sequence[CameraModel],
    voxel_size: float = 0.15,
    sh_degree: int = 3,
    seed: int = 0,
) -> GaussianSet:
    """Build a Gaussian set from a point-cloud prior.

    The cloud is voxel-downsampled to centroids, then points that fall outside
    every camera frustum are dropped. Colors are random; scales come from the
    mean distance to the three nearest neighbours.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise InvalidParameterError("points must be a non-empty (M, 3) array")
    if not np.all(np.isfinite(pts)):
        raise InvalidParameterError("points contain non-finite values")
    if not voxel_size > 0:
        raise InvalidParameterError("voxel_size must be positive")

    centers = voxel_downsample(pts, voxel_size)
    visible = np.zeros(len(centers), dtype=bool)
    for cam in cameras:
        visible |= cam.in_frustum(centers)
    centers = centers[visible]
    n = len(centers)
    if n == 0:
        raise EmptyInitializationError("no points survive voxelization and frustum filtering")

    if n > 1:
        k = min(3, n - 1)
        dist, _ = cKDTree(centers).query(centers, k=k + 1)
        mean_dist = dist[:, 1:].mean(axis=1)
    else:
        mean_dist = np.full(1, voxel_size)
    mean_dist = np.maximum(mean_dist, 1e-7)

    rng = np.random.default_rng(seed)
    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.0, 1.0, size=(n, 3)))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianSet(
        positions=centers,
        log_scales=np.repeat(np.log(mean_dist)[:, None], 3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, inverse_sigmoid(0.1)),
        sh_coeffs=sh,
        sh_degree=sh_degree,
        active_sh_degree=0,
    )


@dataclass
class DensifyOptions:
    grad_threshold: float = 0.0002
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    split_factor: float = 1.6
    scene_extent: float = 1.0


@dataclass
class DensifyResult:
    scene: GaussianSet
    # index of the source Gaussian for carried-over entries, -1 for new ones
    origin: np.ndarray
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def densify_and_prune(
    scene: GaussianSet,
    grad_accum: np.ndarray,
    opts: DensifyOptions | None = None,
    rng: np.random.Generator | None = None,
) -> DensifyResult:
    """Adaptive density control: clone small, split large, prune transparent.

    ``grad_accum`` holds the mean view-space position-gradient norm per
    Gaussian. The split branch replaces a Gaussian with two samples drawn from
    it, with scales divided by ``split_factor``.
    """
    opts = opts or DensifyOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    grad_accum = np.nan_to_num(np.asarray(grad_accum, dtype=np.float64), nan=0.0)
    if grad_accum.shape != (scene.n,):
        raise InvalidParameterError("grad_accum must have one entry per Gaussian")

    hot = grad_accum > opts.grad_threshold
    big = scene.scales.max(axis=1) > opts.percent_dense * opts.scene_extent
    clone = hot & ~big
    split = hot & big
    p = scene.params()

    keep = ~split
    parts = {name: [arr[keep]] for name, arr in p.items()}
    origin = [np.flatnonzero(keep)]

    if clone.any():
        for name, arr in p.items():
            parts[name].append(arr[clone])
        origin.append(np.full(int(clone.sum()), -1))

    if split.any():
        idx = np.flatnonzero(split)
        rot = quat_to_rotmat(scene.rotations[idx])
        scales = scene.scales[idx]
        for _ in range(2):
            offset = rng.normal(size=(len(idx), 3)) * scales
            parts["positions"].append(scene.positions[idx] + np.einsum("nij,nj->ni", rot, offset))
            parts["log_scales"].append(np.log(scales / opts.split_factor))
            for name in ("rotations", "opacity_logits", "sh_coeffs"):
                parts[name].append(p[name][idx])
            origin.append(np.full(len(idx), -1))

    merged = {name: np.concatenate(chunks, axis=0) for name, chunks in parts.items()}
    origin = np.concatenate(origin)

    alive = sigmoid(merged["opacity_logits"]) >= opts.min_opacity
    merged = {name: arr[alive] for name, arr in merged.items()}
    origin = origin[alive]
    out = replace(scene, **merged)
    return DensifyResult(
        scene=out, origin=origin,
        n_cloned=int(clone.sum()), n_split=int(split.sum()),
        n_pruned=int((~alive).sum()),
    )


def reset_opacity(scene: GaussianSet, ceiling: float = 0.01) -> GaussianSet:
    out = scene.copy()
    out.opacity_logits = np.minimum(out.opacity_logits, inverse_sigmoid(ceiling))
    return out
