"""Slow, independent reference implementations used as test oracles.

Nothing here imports the package's numeric code; only plain numpy loops.
"""

from __future__ import annotations

import math

import numpy as np


def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def covariance(log_scale, q):
    r = quat_matrix(q)
    s = np.diag(np.exp(log_scale))
    return r @ s @ s @ r.T


SH0 = 0.28209479177387814
SH1 = 0.4886025119029199


def sh_color(sh, d, degree):
    """Degree 0/1 color from first principles (the only degrees the oracle tests use)."""
    out = SH0 * sh[0]
    if degree >= 1:
        x, y, z = d
        out = out - SH1 * y * sh[1] + SH1 * z * sh[2] - SH1 * x * sh[3]
    return np.maximum(out + 0.5, 0.0)


def _project_all(positions, log_scales, rotations, opacity_logits, sh, camera, degree):
    """Visible Gaussians as (depth, index, mean2d, conic, opacity, color), depth-sorted."""
    h, w = camera.height, camera.width
    rot = np.asarray(camera.world_to_camera)[:3, :3]
    trans = np.asarray(camera.world_to_camera)[:3, 3]
    center = -rot.T @ trans
    lim_x = (-1.3 * camera.cx / camera.fx, 1.3 * (camera.width - camera.cx) / camera.fx)
    lim_y = (-1.3 * camera.cy / camera.fy, 1.3 * (camera.height - camera.cy) / camera.fy)
    items = []
    for i in range(len(positions)):
        p = rot @ positions[i] + trans
        if not camera.near < p[2] < camera.far:
            continue
        xr, yr = p[0] / p[2], p[1] / p[2]
        cx_r = min(max(xr, lim_x[0]), lim_x[1])
        cy_r = min(max(yr, lim_y[0]), lim_y[1])
        jac = np.array([[camera.fx / p[2], 0, -camera.fx * cx_r / p[2]],
                        [0, camera.fy / p[2], -camera.fy * cy_r / p[2]]])
        cov = jac @ rot @ covariance(log_scales[i], rotations[i]) @ rot.T @ jac.T
        cov = cov + 0.3 * np.eye(2)
        mean = np.array([camera.fx * xr + camera.cx, camera.fy * yr + camera.cy])
        a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
        radius = 3 * math.sqrt(0.5 * (a + c) + math.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0)))
        if (mean[0] + radius < 0 or mean[0] - radius > w or mean[1] + radius < 0
                or mean[1] - radius > h):
            continue
        opacity = 1 / (1 + math.exp(-opacity_logits[i]))
        d = positions[i] - center
        color = sh_color(sh[i], d / np.linalg.norm(d), degree)
        items.append((p[2], i, mean, np.linalg.inv(cov), opacity, color))
    items.sort(key=lambda it: (it[0], it[1]))
    return items


def naive_render(positions, log_scales, rotations, opacity_logits, sh, camera, degree=0,
                 semantic=None):
    """Per-pixel compositing over a single global depth sort, no tiling.

    Returns rgb (H, W, 3), depth (H, W), alpha (H, W), semantic (H, W, F) and
    the per-pixel list of (gaussian index, weight) pairs.
    """
    h, w = camera.height, camera.width
    sem = np.zeros((len(positions), 3)) if semantic is None else np.asarray(semantic)
    items = _project_all(positions, log_scales, rotations, opacity_logits, sh, camera, degree)
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha_img = np.zeros((h, w))
    sem_img = np.zeros((h, w, sem.shape[1]))
    weights = {}
    for py in range(h):
        for px in range(w):
            x = np.array([px + 0.5, py + 0.5])
            t = 1.0
            contrib = []
            for z, i, mean, conic, opacity, color in items:
                dlt = x - mean
                power = -0.5 * dlt @ conic @ dlt
                if power > 0:
                    continue
                alpha = min(0.99, opacity * math.exp(power))
                if alpha < 1 / 255:
                    continue
                if t * (1 - alpha) < 1e-4:
                    break
                wgt = alpha * t
                rgb[py, px] += wgt * color
                depth[py, px] += wgt * z
                sem_img[py, px] += wgt * sem[i]
                contrib.append((i, wgt))
                t *= 1 - alpha
            alpha_img[py, px] = 1 - t
            weights[(py, px)] = contrib
    return rgb, depth, alpha_img, sem_img, weights


def sweep_render(positions, log_scales, rotations, opacity_logits, sh, camera, degree=0):
    """Same compositing rule as ``naive_render``, one Gaussian at a time over all pixels.

    Returns rgb, depth and alpha.
    """
    h, w = camera.height, camera.width
    items = _project_all(positions, log_scales, rotations, opacity_logits, sh, camera, degree)
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5, ys + 0.5
    t = np.ones((h, w))
    live = np.ones((h, w), dtype=bool)
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    for z, _, mean, conic, opacity, color in items:
        dx, dy = px - mean[0], py - mean[1]
        power = -0.5 * (conic[0, 0] * dx * dx + conic[1, 1] * dy * dy) - conic[0, 1] * dx * dy
        alpha = np.minimum(0.99, opacity * np.exp(np.minimum(power, 0.0)))
        hit = live & (power <= 0) & (alpha >= 1 / 255)
        test_t = t * (1 - alpha)
        stop = hit & (test_t < 1e-4)
        live &= ~stop
        use = hit & ~stop
        wgt = np.where(use, alpha * t, 0.0)
        rgb += wgt[:, :, None] * color
        depth += wgt * z
        t = np.where(use, test_t, t)
    return rgb, depth, 1 - t


def naive_ssim(a, b, size=11, sigma=1.5):
    """Mean SSIM by explicit windows (valid placements), averaged over channels."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    h, w = a.shape[:2]
    a = a.reshape(h, w, -1)
    b = b.reshape(h, w, -1)
    vals = []
    for ch in range(a.shape[2]):
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                pa = a[i:i + size, j:j + size, ch]
                pb = b[i:i + size, j:j + size, ch]
                ma, mb = (win * pa).sum(), (win * pb).sum()
                va = (win * pa * pa).sum() - ma * ma
                vb = (win * pb * pb).sum() - mb * mb
                cov = (win * pa * pb).sum() - ma * mb
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def scalar_adam(values, grads_seq, lr, beta1=0.9, beta2=0.999, eps=1e-15):
    """Element-by-element Adam in plain Python floats."""
    out = []
    for idx, x in enumerate(values):
        m = v = 0.0
        for step, grads in enumerate(grads_seq, start=1):
            g = grads[idx]
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            mh = m / (1 - beta1 ** step)
            vh = v / (1 - beta2 ** step)
            x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def voxel_centroids(points, voxel):
    """Centroid per occupied voxel via a dict, keyed from the cloud minimum."""
    lo = points.min(axis=0)
    groups = {}
    for p in points:
        key = tuple(int(k) for k in np.floor((p - lo) / voxel))
        groups.setdefault(key, []).append(p)
    return {k: np.mean(v, axis=0) for k, v in groups.items()}


def bilinear(plane, u, v):
    """Bilinear lookup with corner-aligned grid coordinates."""
    ri, rj = plane.shape[:2]
    gi, gj = u * (ri - 1), v * (rj - 1)
    i0, j0 = min(int(math.floor(gi)), ri - 2), min(int(math.floor(gj)), rj - 2)
    fi, fj = gi - i0, gj - j0
    return ((1 - fi) * (1 - fj) * plane[i0, j0] + fi * (1 - fj) * plane[i0 + 1, j0]
            + (1 - fi) * fj * plane[i0, j0 + 1] + fi * fj * plane[i0 + 1, j0 + 1])
