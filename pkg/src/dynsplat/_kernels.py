"""Numba kernels for tile binning, compositing and bilinear plane lookups.

Every kernel writes to disjoint memory per tile (or runs sequentially), so
results do not depend on the thread count.
"""

import math

import numba as nb
import numpy as np

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


@nb.njit(cache=True)
def bin_tiles(order, rect, n_tiles_x, n_tiles_y):
    """Per-tile Gaussian lists, each in the global depth order of ``order``.

    ``rect[g] = (tx0, tx1, ty0, ty1)`` is the half-open tile range touched by
    Gaussian ``g``. Returns ``(tile_start, entries)`` in CSR layout.
    """
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(rect[g, 2], rect[g, 3]):
            for tx in range(rect[g, 0], rect[g, 1]):
                counts[ty * n_tiles_x + tx + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    entries = np.empty(counts[n_tiles], dtype=np.int64)
    fill = counts[:n_tiles].copy()
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(rect[g, 2], rect[g, 3]):
            for tx in range(rect[g, 0], rect[g, 1]):
                t = ty * n_tiles_x + tx
                entries[fill[t]] = g
                fill[t] += 1
    return counts, entries


@nb.njit(cache=True)
def _power_cutoff(opacity):
    """Exponent below which a Gaussian's alpha is certainly under ALPHA_MIN.

    The margin keeps the shortcut from changing any borderline decision made
    by the exact test after ``exp``.
    """
    out = np.empty(opacity.shape[0])
    for g in range(opacity.shape[0]):
        if opacity[g] > 0.0:
            c = math.log(ALPHA_MIN / opacity[g])
            out[g] = c - 1e-9 * (1.0 + abs(c))
        else:
            out[g] = np.inf
    return out


@nb.njit(cache=True)
def _gather(entries, s0, s1, mean2d, conic, cutoff):
    """Tile-local copy of the splat parameters: x, y, conic xx/xy/yy, cutoff."""
    loc = np.empty((s1 - s0, 6))
    for k in range(s1 - s0):
        g = entries[s0 + k]
        loc[k, 0] = mean2d[g, 0]
        loc[k, 1] = mean2d[g, 1]
        loc[k, 2] = conic[g, 0]
        loc[k, 3] = conic[g, 1]
        loc[k, 4] = conic[g, 2]
        loc[k, 5] = cutoff[g]
    return loc


def _composite_forward(tile_start, entries, mean2d, conic, opacity, feats,
                      width, height, tile):
    """Front-to-back alpha compositing of ``feats`` (N, C) per pixel."""
    n_tiles_x = (width + tile - 1) // tile
    n_tiles_y = (height + tile - 1) // tile
    n_ch = feats.shape[1]
    out = np.zeros((height, width, n_ch))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    cutoff = _power_cutoff(opacity)
    for t in nb.prange(n_tiles_x * n_tiles_y):
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        s0 = tile_start[t]
        s1 = tile_start[t + 1]
        loc = _gather(entries, s0, s1, mean2d, conic, cutoff)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                x = px + 0.5
                y = py + 0.5
                trans = 1.0
                last = 0
                for e in range(s0, s1):
                    k = e - s0
                    dx = x - loc[k, 0]
                    dy = y - loc[k, 1]
                    power = -0.5 * (loc[k, 2] * dx * dx + loc[k, 4] * dy * dy) \
                        - loc[k, 3] * dx * dy
                    if power > 0.0 or power < loc[k, 5]:
                        continue
                    g = entries[e]
                    alpha = min(ALPHA_MAX, opacity[g] * math.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    test_t = trans * (1.0 - alpha)
                    if test_t < T_MIN:
                        break
                    w = alpha * trans
                    for c in range(n_ch):
                        out[py, px, c] += feats[g, c] * w
                    trans = test_t
                    last = e - s0 + 1
                final_t[py, px] = trans
                n_contrib[py, px] = last
    return out, final_t, n_contrib


def _composite_backward(tile_start, entries, mean2d, conic, opacity, feats,
                       width, height, tile, n_contrib, grad_out, grad_alpha):
    """Per-entry gradients of the compositing step.

    Row layout of the returned (E, 6 + C) array: d mean2d (2), d conic
    matrix entries xx, xy, yy (3), d opacity (1), d feats (C). The xy entry
    is the gradient of one off-diagonal element of the symmetric conic.
    """
    n_tiles_x = (width + tile - 1) // tile
    n_tiles_y = (height + tile - 1) // tile
    n_ch = feats.shape[1]
    grad_entry = np.zeros((entries.shape[0], 6 + n_ch))
    cutoff = _power_cutoff(opacity)
    for t in nb.prange(n_tiles_x * n_tiles_y):
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        s0 = tile_start[t]
        s1 = tile_start[t + 1]
        m = s1 - s0
        loc = _gather(entries, s0, s1, mean2d, conic, cutoff)
        loc_e = np.empty(m, dtype=np.int64)
        loc_a = np.empty(m)
        loc_t = np.empty(m)
        loc_g = np.empty(m)
        loc_clip = np.empty(m, dtype=np.bool_)
        acc = np.empty(n_ch)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                x = px + 0.5
                y = py + 0.5
                stop = s0 + n_contrib[py, px]
                trans = 1.0
                k = 0
                for e in range(s0, stop):
                    q = e - s0
                    dx = x - loc[q, 0]
                    dy = y - loc[q, 1]
                    power = -0.5 * (loc[q, 2] * dx * dx + loc[q, 4] * dy * dy) \
                        - loc[q, 3] * dx * dy
                    if power > 0.0 or power < loc[q, 5]:
                        continue
                    g = entries[e]
                    gauss = math.exp(power)
                    raw = opacity[g] * gauss
                    alpha = min(ALPHA_MAX, raw)
                    if alpha < ALPHA_MIN:
                        continue
                    loc_e[k] = e
                    loc_a[k] = alpha
                    loc_t[k] = trans
                    loc_g[k] = gauss
                    loc_clip[k] = raw > ALPHA_MAX
                    trans = trans * (1.0 - alpha)
                    k += 1
                for c in range(n_ch):
                    acc[c] = 0.0
                acc_a = 0.0
                ga = grad_alpha[py, px]
                for j in range(k - 1, -1, -1):
                    e = loc_e[j]
                    g = entries[e]
                    alpha = loc_a[j]
                    trans = loc_t[j]
                    w = alpha * trans
                    dl_dalpha = ga * (1.0 - acc_a)
                    for c in range(n_ch):
                        go = grad_out[py, px, c]
                        dl_dalpha += go * (feats[g, c] - acc[c])
                        grad_entry[e, 6 + c] += go * w
                    dl_dalpha *= trans
                    for c in range(n_ch):
                        acc[c] = feats[g, c] * alpha + (1.0 - alpha) * acc[c]
                    acc_a = alpha + (1.0 - alpha) * acc_a
                    if loc_clip[j]:
                        continue
                    grad_entry[e, 5] += dl_dalpha * loc_g[j]
                    dl_dpower = dl_dalpha * alpha
                    dx = x - mean2d[g, 0]
                    dy = y - mean2d[g, 1]
                    grad_entry[e, 0] += dl_dpower * (conic[g, 0] * dx + conic[g, 1] * dy)
                    grad_entry[e, 1] += dl_dpower * (conic[g, 1] * dx + conic[g, 2] * dy)
                    grad_entry[e, 2] += -0.5 * dx * dx * dl_dpower
                    grad_entry[e, 3] += -0.5 * dx * dy * dl_dpower
                    grad_entry[e, 4] += -0.5 * dy * dy * dl_dpower
    return grad_entry


_forward_par = nb.njit(parallel=True, cache=True)(_composite_forward)
_forward_seq = nb.njit(cache=True)(_composite_forward)
_backward_par = nb.njit(parallel=True, cache=True)(_composite_backward)
_backward_seq = nb.njit(cache=True)(_composite_backward)


def composite_forward(*args):
    """Front-to-back alpha compositing of ``feats`` (N, C) per pixel.

    Dispatches to the serial build when numba runs a single thread, which
    avoids the parallel scheduler's overhead; both builds give identical
    results.
    """
    fn = _forward_par if nb.get_num_threads() > 1 else _forward_seq
    return fn(*args)


def composite_backward(*args):
    """Per-entry gradients of the compositing step; see ``_composite_backward``."""
    fn = _backward_par if nb.get_num_threads() > 1 else _backward_seq
    return fn(*args)


@nb.njit(cache=True)
def reduce_entries(entries, grad_entry, n):
    """Sum per-entry rows into per-Gaussian rows in fixed entry order."""
    out = np.zeros((n, grad_entry.shape[1]))
    for e in range(entries.shape[0]):
        g = entries[e]
        for c in range(grad_entry.shape[1]):
            out[g, c] += grad_entry[e, c]
    return out


@nb.njit(cache=True)
def _cell(u, res):
    if res == 1:
        return 0, 0.0
    gi = u * (res - 1)
    i0 = int(math.floor(gi))
    if i0 > res - 2:
        i0 = res - 2
    if i0 < 0:
        i0 = 0
    return i0, gi - i0


@nb.njit(cache=True)
def plane_query(plane, u, v):
    """Bilinear lookup of a (Ri, Rj, d) plane at normalized coordinates (u, v)."""
    ri, rj, d = plane.shape
    n = u.shape[0]
    out = np.empty((n, d))
    i0s = np.empty(n, dtype=np.int64)
    j0s = np.empty(n, dtype=np.int64)
    fis = np.empty(n)
    fjs = np.empty(n)
    for k in range(n):
        i0, fi = _cell(u[k], ri)
        j0, fj = _cell(v[k], rj)
        i1 = min(i0 + 1, ri - 1)
        j1 = min(j0 + 1, rj - 1)
        w00 = (1.0 - fi) * (1.0 - fj)
        w01 = (1.0 - fi) * fj
        w10 = fi * (1.0 - fj)
        w11 = fi * fj
        for c in range(d):
            out[k, c] = (w00 * plane[i0, j0, c] + w01 * plane[i0, j1, c]
                         + w10 * plane[i1, j0, c] + w11 * plane[i1, j1, c])
        i0s[k] = i0
        j0s[k] = j0
        fis[k] = fi
        fjs[k] = fj
    return out, i0s, j0s, fis, fjs


@nb.njit(cache=True)
def plane_backward(plane, grad_plane, grad_out, i0s, j0s, fis, fjs):
    """Scatter ``grad_out`` (N, d) into ``grad_plane``; return d/du, d/dv per query."""
    ri, rj, d = plane.shape
    n = grad_out.shape[0]
    gu = np.zeros(n)
    gv = np.zeros(n)
    for k in range(n):
        i0 = i0s[k]
        j0 = j0s[k]
        fi = fis[k]
        fj = fjs[k]
        i1 = min(i0 + 1, ri - 1)
        j1 = min(j0 + 1, rj - 1)
        w00 = (1.0 - fi) * (1.0 - fj)
        w01 = (1.0 - fi) * fj
        w10 = fi * (1.0 - fj)
        w11 = fi * fj
        su = 0.0
        sv = 0.0
        for c in range(d):
            g = grad_out[k, c]
            if g == 0.0:
                continue
            grad_plane[i0, j0, c] += w00 * g
            grad_plane[i0, j1, c] += w01 * g
            grad_plane[i1, j0, c] += w10 * g
            grad_plane[i1, j1, c] += w11 * g
            p00 = plane[i0, j0, c]
            p01 = plane[i0, j1, c]
            p10 = plane[i1, j0, c]
            p11 = plane[i1, j1, c]
            su += g * ((1.0 - fj) * (p10 - p00) + fj * (p11 - p01))
            sv += g * ((1.0 - fi) * (p01 - p00) + fi * (p11 - p10))
        if ri > 1:
            gu[k] = su * (ri - 1)
        if rj > 1:
            gv[k] = sv * (rj - 1)
    return gu, gv


@nb.njit(cache=True)
def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place bias-corrected Adam update over flat (1-D) arrays."""
    p = param
    g = grad
    mm = m
    vv = v
    step = lr / bc1
    inv_bc2 = 1.0 / bc2
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * mm[i] + (1.0 - beta1) * gi
        vi = beta2 * vv[i] + (1.0 - beta2) * gi * gi
        mm[i] = mi
        vv[i] = vi
        p[i] -= step * mi / (math.sqrt(vi * inv_bc2) + eps)
