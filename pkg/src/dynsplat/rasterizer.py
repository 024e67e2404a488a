"""Differentiable tile-based Gaussian splatting.

Gaussians are projected with the local affine (EWA) approximation, sorted
globally by camera depth, binned into square tiles and alpha-composited front
to back. RGB, camera depth, semantic features and accumulated alpha share one
set of compositing weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .camera import CameraModel
from .errors import InvalidParameterError, RenderDiagnosticsError
from .gaussians import (
    build_covariances, quat_to_rotmat, rotmat_grad_to_quat, sh_basis, sh_basis_jacobian, sigmoid,
)

LOWPASS = 0.3
FRUSTUM_MARGIN = 1.3
TILE_SIZE = 16


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray | None = None
    opacity: float | None = None
    semantic: np.ndarray | None = None


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3)
    depth: np.ndarray     # (H, W)
    semantic: np.ndarray  # (H, W, F)
    alpha: np.ndarray     # (H, W)


@dataclass
class _Projection:
    cam_points: np.ndarray   # (N, 3)
    mean2d: np.ndarray       # (N, 2)
    cov_cam: np.ndarray      # (N, 3, 3)
    jac: np.ndarray          # (N, 2, 3)
    cov2d: np.ndarray        # (N, 2, 2), dilated
    ratio: np.ndarray        # (N, 2) clamped x/z, y/z used in the Jacobian
    clamped: np.ndarray      # (N, 2) bool
    visible: np.ndarray      # (N,) bool


def _project_batch(means: np.ndarray, covs: np.ndarray, camera: CameraModel) -> _Projection:
    rot = camera.rotation
    t = means @ rot.T + camera.translation
    z = t[:, 2]
    n = len(means)
    in_depth = (z > camera.near) & (z < camera.far)
    zs = np.where(in_depth, z, 1.0)

    lo = np.array([-camera.cx / camera.fx, -camera.cy / camera.fy]) * FRUSTUM_MARGIN
    hi = np.array([(camera.width - camera.cx) / camera.fx,
                   (camera.height - camera.cy) / camera.fy]) * FRUSTUM_MARGIN
    raw_ratio = t[:, :2] / zs[:, None]
    ratio = np.clip(raw_ratio, lo, hi)
    clamped = (raw_ratio < lo) | (raw_ratio > hi)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * ratio[:, 0] / zs
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * ratio[:, 1] / zs
    cov_cam = rot @ covs @ rot.T
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    mean2d = np.stack([camera.fx * raw_ratio[:, 0] + camera.cx,
                       camera.fy * raw_ratio[:, 1] + camera.cy], axis=1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    r3 = 3.0 * np.sqrt(lam_max)
    on_image = ((mean2d[:, 0] + r3 >= 0) & (mean2d[:, 0] - r3 <= camera.width)
                & (mean2d[:, 1] + r3 >= 0) & (mean2d[:, 1] - r3 <= camera.height))
    visible = in_depth & on_image
    return _Projection(t, mean2d, cov_cam, jac, cov2d, ratio, clamped, visible)


def project(mean, cov, camera: CameraModel) -> ProjectedGaussian | None:
    """Project one Gaussian; ``None`` when it is culled."""
    proj = _project_batch(np.asarray(mean, dtype=np.float64)[None],
                          np.asarray(cov, dtype=np.float64)[None], camera)
    if not proj.visible[0]:
        return None
    return ProjectedGaussian(mean2d=proj.mean2d[0], cov2d=proj.cov2d[0],
                             depth=float(proj.cam_points[0, 2]))


@dataclass
class RenderRecord:
    """Everything the backward pass needs from one forward render."""

    camera: CameraModel
    n: int
    sh_degree: int
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    rotmats: np.ndarray
    proj: _Projection
    conic: np.ndarray
    opacity: np.ndarray
    basis: np.ndarray
    sh_active: np.ndarray     # (N, K, 3) coefficients used for the color
    dir_grad: bool            # propagate through the SH view direction
    color_active: np.ndarray  # (N, 3) bool, unclamped color channels
    feats: np.ndarray
    tile_start: np.ndarray
    entries: np.ndarray
    n_contrib: np.ndarray
    semantic_dim: int
    tile: int


@dataclass
class RenderGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    semantic: np.ndarray
    mean2d: np.ndarray          # (N, 2), pixels
    viewspace_norm: np.ndarray  # (N,) |d mean2d| in NDC units
    visible: np.ndarray


def _check_finite(**arrays):
    for name, arr in arrays.items():
        if arr.size == 0:
            continue
        bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise RenderDiagnosticsError(f"non-finite {name} for Gaussian {idx}", idx)


def view_directions(positions: np.ndarray, camera: CameraModel) -> np.ndarray:
    dirs = positions - camera.center
    return dirs / np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)


def render(
    positions: np.ndarray,
    log_scales: np.ndarray,
    rotations: np.ndarray,
    opacity_logits: np.ndarray,
    sh_coeffs: np.ndarray,
    camera: CameraModel,
    sh_degree: int = 0,
    semantic: np.ndarray | None = None,
    semantic_dim: int = 3,
    tile: int = TILE_SIZE,
    view_dirs: np.ndarray | None = None,
    view_dir_grad: bool = False,
) -> tuple[RenderOutput, RenderRecord]:
    """Render Gaussians from ``camera``; returns the images and a backward record.

    ``view_dirs`` overrides the per-Gaussian SH view directions (unit vectors
    from the camera center). By default the view directions are constants in
    backward, as in 3DGS; ``view_dir_grad=True`` adds their dependence on the
    positions (ignored when ``view_dirs`` is given).
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if semantic is None:
        semantic = np.zeros((n, semantic_dim))
    semantic = np.asarray(semantic, dtype=np.float64)
    semantic_dim = semantic.shape[1]
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    _check_finite(positions=positions, log_scales=log_scales, rotations=rotations,
                  opacity_logits=np.asarray(opacity_logits).reshape(n, 1),
                  sh_coeffs=sh_coeffs, semantic=semantic)

    h, w = camera.height, camera.width
    if n == 0:
        out = RenderOutput(np.zeros((h, w, 3)), np.zeros((h, w)),
                           np.zeros((h, w, semantic_dim)), np.zeros((h, w)))
        return out, None

    rotmats = quat_to_rotmat(rotations)
    with np.errstate(over="ignore", invalid="ignore"):
        covs = build_covariances(log_scales, rotations)
    _check_finite(covariance=covs)
    proj = _project_batch(positions, covs, camera)

    cov2d = proj.cov2d
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    opacity = sigmoid(opacity_logits)

    dirs = view_directions(positions, camera) if view_dirs is None else view_dirs
    basis = sh_basis(dirs, sh_degree)
    k = basis.shape[1]
    raw = np.einsum("nk,nkc->nc", basis, sh_coeffs[:, :k]) + 0.5
    color_active = raw > 0.0
    color = np.where(color_active, raw, 0.0)

    feats = np.concatenate([color, proj.cam_points[:, 2:3], semantic], axis=1)

    # Tile footprint: the exact bounding box of the region where
    # opacity * exp(power) >= 1/255, padded by one pixel.
    visible = proj.visible & (opacity >= K.ALPHA_MIN)
    level = 2.0 * np.log(np.maximum(opacity, K.ALPHA_MIN) * 255.0)
    ext_x = np.sqrt(np.maximum(level * cov2d[:, 0, 0], 0.0)) + 1.0
    ext_y = np.sqrt(np.maximum(level * cov2d[:, 1, 1], 0.0)) + 1.0
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    with np.errstate(invalid="ignore"):
        rect = np.stack([
            np.floor((mx - ext_x) / tile), np.floor((mx + ext_x) / tile) + 1,
            np.floor((my - ext_y) / tile), np.floor((my + ext_y) / tile) + 1,
        ], axis=1)
    rect = np.nan_to_num(rect, nan=0.0, posinf=0.0, neginf=0.0)
    rect[:, 0:2] = np.clip(rect[:, 0:2], 0, ntx)
    rect[:, 2:4] = np.clip(rect[:, 2:4], 0, nty)
    rect = rect.astype(np.int64)
    rect[~visible] = 0

    idx = np.flatnonzero(visible)
    depth = proj.cam_points[idx, 2]
    order = idx[np.lexsort((idx, depth))]
    tile_start, entries = K.bin_tiles(order, rect, ntx, nty)
    out, final_t, n_contrib = K.composite_forward(
        tile_start, entries, proj.mean2d, conic, opacity, feats, w, h, tile)

    result = RenderOutput(
        rgb=out[:, :, :3].copy(),
        depth=out[:, :, 3].copy(),
        semantic=out[:, :, 4:].copy(),
        alpha=1.0 - final_t,
    )
    proj.visible = visible
    record = RenderRecord(
        camera=camera, n=n, sh_degree=sh_degree, positions=positions,
        log_scales=np.asarray(log_scales, dtype=np.float64),
        rotations=np.asarray(rotations, dtype=np.float64),
        opacity_logits=np.asarray(opacity_logits, dtype=np.float64),
        rotmats=rotmats, proj=proj, conic=conic, opacity=opacity, basis=basis,
        sh_active=sh_coeffs[:, :k], dir_grad=view_dir_grad and view_dirs is None,
        color_active=color_active, feats=feats, tile_start=tile_start,
        entries=entries, n_contrib=n_contrib, semantic_dim=semantic_dim, tile=tile,
    )
    return result, record


def render_gaussians(scene, camera: CameraModel, semantic=None, sh_coeffs=None, positions=None,
                     tile: int = TILE_SIZE):
    """Convenience wrapper rendering a ``GaussianSet`` or ``DeformedGaussians``."""
    return render(
        scene.positions if positions is None else positions,
        scene.log_scales, scene.rotations, scene.opacity_logits,
        scene.sh_coeffs if sh_coeffs is None else sh_coeffs,
        camera, sh_degree=scene.active_sh_degree,
        semantic=getattr(scene, "semantic", None) if semantic is None else semantic,
        tile=tile,
    )


def render_backward(
    record: RenderRecord | None,
    grad_rgb: np.ndarray,
    grad_depth: np.ndarray | None = None,
    grad_semantic: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
) -> RenderGrads:
    """Analytic gradients of a scalar loss w.r.t. the rendered Gaussians' attributes.

    Position gradients include the path through the SH view direction only if
    the forward pass was asked for it.
    """
    if record is None:
        raise InvalidParameterError("no forward record (empty scene or missing forward pass)")
    cam = record.camera
    h, w = cam.height, cam.width
    f = record.semantic_dim
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (h, w, 3):
        raise InvalidParameterError(f"grad_rgb has shape {grad_rgb.shape}, expected {(h, w, 3)}")
    grad_depth = np.zeros((h, w)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    grad_semantic = (np.zeros((h, w, f)) if grad_semantic is None
                     else np.asarray(grad_semantic, dtype=np.float64))
    grad_alpha = np.zeros((h, w)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
    if grad_depth.shape != (h, w) or grad_alpha.shape != (h, w) or grad_semantic.shape != (h, w, f):
        raise InvalidParameterError("upstream gradient shapes do not match the render")

    grad_out = np.concatenate([grad_rgb, grad_depth[:, :, None], grad_semantic], axis=2)
    proj = record.proj
    grad_entry = K.composite_backward(
        record.tile_start, record.entries, proj.mean2d, record.conic, record.opacity,
        record.feats, w, h, record.tile, record.n_contrib, grad_out, grad_alpha)
    g = K.reduce_entries(record.entries, grad_entry, record.n)

    n = record.n
    vis = proj.visible
    g_mean2d = g[:, 0:2]
    g_conic = np.empty((n, 2, 2))
    g_conic[:, 0, 0] = g[:, 2]
    g_conic[:, 0, 1] = g[:, 3]
    g_conic[:, 1, 0] = g[:, 3]
    g_conic[:, 1, 1] = g[:, 4]
    g_opacity = g[:, 5]
    g_color = g[:, 6:9]
    g_z = g[:, 9]
    g_sem = g[:, 10:10 + f]

    # conic = inv(cov2d)
    conic_m = np.empty((n, 2, 2))
    conic_m[:, 0, 0] = record.conic[:, 0]
    conic_m[:, 0, 1] = conic_m[:, 1, 0] = record.conic[:, 1]
    conic_m[:, 1, 1] = record.conic[:, 2]
    g_cov2d = -conic_m @ g_conic @ conic_m

    jac = proj.jac
    g_cov_cam = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ proj.cov_cam
    rot = cam.rotation
    g_cov = rot.T @ g_cov_cam @ rot

    t = proj.cam_points
    z = np.where(vis, t[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 2] += (-fx * g_jac[:, 0, 0] - fy * g_jac[:, 1, 1]) / z ** 2
    g_t[:, 2] += (fx * proj.ratio[:, 0] * g_jac[:, 0, 2] + fy * proj.ratio[:, 1] * g_jac[:, 1, 2]) / z ** 2
    g_ratio = np.stack([-fx * g_jac[:, 0, 2] / z, -fy * g_jac[:, 1, 2] / z], axis=1)
    g_ratio = np.where(proj.clamped, 0.0, g_ratio)
    # mean2d depends on the unclamped ratio
    g_ratio_total = g_ratio + np.stack([fx * g_mean2d[:, 0], fy * g_mean2d[:, 1]], axis=1)
    g_t[:, 0] += g_ratio_total[:, 0] / z
    g_t[:, 1] += g_ratio_total[:, 1] / z
    g_t[:, 2] -= (g_ratio_total[:, 0] * t[:, 0] + g_ratio_total[:, 1] * t[:, 1]) / z ** 2
    g_t[:, 2] += g_z
    g_pos = g_t @ rot

    # cov = M M^T with M = R diag(s)
    scales = np.exp(record.log_scales)
    m = record.rotmats * scales[:, None, :]
    g_cov_sym = 0.5 * (g_cov + np.swapaxes(g_cov, 1, 2))
    g_m = 2.0 * g_cov_sym @ m
    g_scales = np.einsum("nij,nij->nj", g_m, record.rotmats)
    g_log_scales = g_scales * scales
    g_rotmat = g_m * scales[:, None, :]
    g_rot = rotmat_grad_to_quat(record.rotations, g_rotmat)

    g_logit = g_opacity * record.opacity * (1.0 - record.opacity)

    g_color = np.where(record.color_active, g_color, 0.0)
    g_sh_active = np.einsum("nk,nc->nkc", record.basis, g_color)
    if record.sh_degree > 0 and record.dir_grad:
        # color depends on the unit direction from the camera center
        offset = record.positions - cam.center
        dist = np.maximum(np.linalg.norm(offset, axis=1, keepdims=True), 1e-12)
        unit = offset / dist
        jac_basis = sh_basis_jacobian(unit, record.sh_degree)
        g_unit = np.einsum("nc,nkc,nkd->nd", g_color, record.sh_active, jac_basis)
        g_pos = g_pos + (g_unit - unit * np.sum(unit * g_unit, axis=1, keepdims=True)) / dist

    out_pos = np.where(vis[:, None], g_pos, 0.0)
    out_ls = np.where(vis[:, None], g_log_scales, 0.0)
    out_rot = np.where(vis[:, None], g_rot, 0.0)
    out_logit = np.where(vis, g_logit, 0.0)
    out_sem = np.where(vis[:, None], g_sem, 0.0)
    g_sh_active = np.where(vis[:, None, None], g_sh_active, 0.0)
    g_mean2d = np.where(vis[:, None], g_mean2d, 0.0)
    ndc = np.stack([g_mean2d[:, 0] * 0.5 * w, g_mean2d[:, 1] * 0.5 * h], axis=1)
    return RenderGrads(
        positions=out_pos, log_scales=out_ls, rotations=out_rot,
        opacity_logits=out_logit, sh_coeffs=g_sh_active, semantic=out_sem,
        mean2d=g_mean2d, viewspace_norm=np.linalg.norm(ndc, axis=1), visible=vis.copy(),
    )


def pad_sh_grad(g_sh_active: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Zero-extend an active-degree SH gradient to the full coefficient count."""
    n, k, _ = g_sh_active.shape
    if k == n_coeffs:
        return g_sh_active
    out = np.zeros((n, n_coeffs, 3))
    out[:, :k] = g_sh_active
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def num_tiles(camera: CameraModel, tile: int = TILE_SIZE) -> int:
    return math.ceil(camera.width / tile) * math.ceil(camera.height / tile)
