"""Training losses with analytic gradients, and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidParameterError, NonFiniteLossError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

TERMS = ("rgb", "depth", "feat", "ssim", "tv", "reg_x", "reg_c")


@dataclass
class LossWeights:
    rgb: float = 1.0
    depth: float = 0.1
    feat: float = 0.1
    ssim: float = 0.1
    tv: float = 0.1
    reg_x: float = 0.01
    reg_c: float = 0.01

    def __post_init__(self):
        for name in TERMS:
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value >= 0):
                raise InvalidParameterError(f"loss weight {name} must be finite and >= 0")
            setattr(self, name, value)

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in TERMS)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    terms: dict[str, float]
    weights: LossWeights
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(getattr(self.weights, k) * v for k, v in self.terms.items()))


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_rgb(render: np.ndarray, target: np.ndarray) -> float:
    render, target = np.asarray(render, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_shapes(render, target)
    return float(np.mean(np.abs(render - target)))


def l1_rgb_grad(render, target):
    render, target = np.asarray(render, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_shapes(render, target)
    diff = render - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-mode separable correlation over the first two axes."""
    r = len(win) // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _filter_adjoint(m: np.ndarray, shape, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    full = np.zeros(shape)
    full[r:shape[0] - r, r:shape[1] - r] = m
    out = correlate1d(full, win, axis=0, mode="constant")
    return correlate1d(out, win, axis=1, mode="constant")


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def _ssim_parts(x, y, win):
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x * mu_x
    syy = _filter_valid(y * y, win) - mu_y * mu_y
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_map(render, target) -> np.ndarray:
    """Per-window SSIM over the valid region, shape (H - 10, W - 10, C)."""
    x, y = _as_hwc(render), _as_hwc(target)
    _check_shapes(x, y)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise InvalidParameterError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    _, _, a1, a2, b1, b2 = _ssim_parts(x, y, gaussian_window())
    return (a1 * a2) / (b1 * b2)


def ssim(render, target) -> float:
    """Mean SSIM over channels and valid window positions."""
    return float(np.mean(ssim_map(render, target)))


def ssim_loss_grad(render, target):
    """Value of ``1 - ssim`` and its gradient w.r.t. ``render``."""
    x, y = _as_hwc(render), _as_hwc(target)
    _check_shapes(x, y)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise InvalidParameterError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_parts(x, y, win)
    s = (a1 * a2) / (b1 * b2)
    count = s.size
    d_mu = (2.0 * mu_y * a2 / (b1 * b2) - 2.0 * mu_x * s / b1) / count
    d_sxx = (-s / b2) / count
    d_sxy = (2.0 * a1 / (b1 * b2)) / count
    coef_a = d_mu - 2.0 * mu_x * d_sxx - mu_y * d_sxy
    grad = (_filter_adjoint(coef_a, x.shape, win)
            + 2.0 * x * _filter_adjoint(d_sxx, x.shape, win)
            + y * _filter_adjoint(d_sxy, x.shape, win))
    grad = -grad
    return 1.0 - float(np.mean(s)), grad.reshape(np.shape(render))


def masked_ssim(render, target, mask) -> float:
    """SSIM averaged over valid window centers that fall inside ``mask``."""
    m = ssim_map(render, target)
    mask = np.asarray(mask, dtype=bool)
    r = SSIM_WINDOW // 2
    inner = mask[r:mask.shape[0] - r, r:mask.shape[1] - r]
    if not inner.any():
        raise InvalidParameterError("mask has no pixels inside the valid SSIM region")
    return float(np.mean(m[inner]))


def _depth_samples(samples):
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    return s[:, 0].astype(np.int64), s[:, 1].astype(np.int64), s[:, 2]


def depth_l2(render_depth, sparse_depth) -> float:
    """Mean squared depth error over pixels carrying samples ``(u, v, meters)``."""
    u, v, d = _depth_samples(sparse_depth)
    if len(d) == 0:
        return 0.0
    render_depth = np.asarray(render_depth, dtype=np.float64)
    _check_pixels(u, v, render_depth.shape)
    return float(np.mean((render_depth[v, u] - d) ** 2))


def depth_l2_grad(render_depth, sparse_depth):
    render_depth = np.asarray(render_depth, dtype=np.float64)
    u, v, d = _depth_samples(sparse_depth)
    grad = np.zeros_like(render_depth)
    if len(d) == 0:
        return 0.0, grad
    _check_pixels(u, v, render_depth.shape)
    r = render_depth[v, u] - d
    np.add.at(grad, (v, u), 2.0 * r / len(d))
    return float(np.mean(r * r)), grad


def _check_pixels(u, v, shape):
    if np.any((u < 0) | (u >= shape[1]) | (v < 0) | (v >= shape[0])):
        raise InvalidParameterError("depth sample outside the image")


def feat_l2(render_sem, target_sem) -> float:
    a, b = np.asarray(render_sem, dtype=np.float64), np.asarray(target_sem, dtype=np.float64)
    _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def feat_l2_grad(render_sem, target_sem):
    a, b = np.asarray(render_sem, dtype=np.float64), np.asarray(target_sem, dtype=np.float64)
    _check_shapes(a, b)
    r = a - b
    return float(np.mean(r * r)), 2.0 * r / r.size


def reg_offsets(dx, dsh) -> tuple[float, float]:
    """Mean absolute position offset and mean absolute SH offset."""
    dx, dsh = np.asarray(dx, dtype=np.float64), np.asarray(dsh, dtype=np.float64)
    rx = float(np.mean(np.abs(dx))) if dx.size else 0.0
    rc = float(np.mean(np.abs(dsh))) if dsh.size else 0.0
    return rx, rc


def reg_offsets_grad(dx, dsh):
    dx, dsh = np.asarray(dx, dtype=np.float64), np.asarray(dsh, dtype=np.float64)
    gx = np.sign(dx) / max(dx.size, 1)
    gc = np.sign(dsh) / max(dsh.size, 1)
    return reg_offsets(dx, dsh), gx, gc


def total_loss(terms: dict[str, float], weights: LossWeights | None = None,
               iteration: int | None = None) -> LossBreakdown:
    """Weighted sum of the loss terms; missing terms count as zero."""
    weights = weights or LossWeights()
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise InvalidParameterError(f"unknown loss terms {sorted(unknown)}")
    full = {name: float(terms.get(name, 0.0)) for name in TERMS}
    for name, value in full.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value, iteration)
    return LossBreakdown(full, weights)


def mse(render, target, mask=None) -> float:
    a, b = np.asarray(render, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_shapes(a, b)
    if mask is None:
        return float(np.mean((a - b) ** 2))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise InvalidParameterError("mask shape does not match the image")
    if not mask.any():
        raise InvalidParameterError("empty mask")
    return float(np.mean((a[mask] - b[mask]) ** 2))


def _psnr_from_mse(value: float) -> float:
    if value == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / value)


def psnr(render, target) -> float:
    """PSNR in dB for images scaled to [0, 1]; identical images give ``inf``."""
    return _psnr_from_mse(mse(render, target))


def masked_psnr(render, target, mask) -> float:
    return _psnr_from_mse(mse(render, target, mask))
