"""Spatial-temporal deformation field.

Six factored feature planes per resolution scale are queried bilinearly,
fused by an elementwise product, concatenated across scales and merged by a
small MLP. Three decoder heads turn the merged feature into a position
offset, an SH offset and a semantic feature per Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import _kernels as K
from .errors import FieldStateError, InvalidParameterError
from .gaussians import GaussianSet, num_sh_coeffs

PLANE_PAIRS = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
SPATIAL_PLANES = ("xy", "xz", "yz")
TEMPORAL_PLANES = ("xt", "yt", "zt")


@dataclass
class SceneBounds:
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64).reshape(3)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64).reshape(3)
        self.t_min = float(self.t_min)
        self.t_max = float(self.t_max)
        if not (np.all(np.isfinite(self.aabb_min)) and np.all(np.isfinite(self.aabb_max))):
            raise InvalidParameterError("bounds must be finite")
        if not np.all(self.aabb_max > self.aabb_min):
            raise InvalidParameterError("aabb_max must exceed aabb_min on every axis")
        if not self.t_max > self.t_min:
            raise InvalidParameterError("t_max must exceed t_min")

    @classmethod
    def from_points(cls, points, t_min=0.0, t_max=1.0, pad=0.1) -> "SceneBounds":
        lo, hi = points.min(axis=0), points.max(axis=0)
        extent = np.maximum(hi - lo, 1e-3)
        return cls(lo - pad * extent, hi + pad * extent, t_min, t_max)

    @property
    def lower(self) -> np.ndarray:
        return np.append(self.aabb_min, self.t_min)

    @property
    def upper(self) -> np.ndarray:
        return np.append(self.aabb_max, self.t_max)

    def to_dict(self) -> dict:
        return {"aabb_min": self.aabb_min.tolist(), "aabb_max": self.aabb_max.tolist(),
                "t_min": self.t_min, "t_max": self.t_max}

    @classmethod
    def from_dict(cls, d) -> "SceneBounds":
        return cls(d["aabb_min"], d["aabb_max"], d.get("t_min", 0.0), d.get("t_max", 1.0))


def normalize_coords(x, y, z, t, bounds: SceneBounds) -> np.ndarray:
    """Affine map of (x, y, z, t) into the unit hypercube, clamped."""
    pt = np.stack(np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, z, t))), axis=-1)
    return np.clip((pt - bounds.lower) / (bounds.upper - bounds.lower), 0.0, 1.0)


def query_plane(plane: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup of a (Ri, Rj, d) plane; grid coordinate = u * (Ri - 1)."""
    scalar = np.ndim(u) == 0 and np.ndim(v) == 0
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    out = K.plane_query(np.ascontiguousarray(plane, dtype=np.float64), u, v)[0]
    return out[0] if scalar else out


@dataclass
class FieldConfig:
    base_resolution: int = 64
    time_resolution: int = 50
    scales: tuple = (1, 2, 4)
    hidden_dim: int = 32
    merge_width: int = 64
    feature_dim: int = 64
    head_width: int = 64
    semantic_dim: int = 3
    sh_degree: int = 3
    defer_color: bool = True
    spatial_init: tuple = (0.1, 0.5)

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.spatial_init = tuple(float(s) for s in self.spatial_init)
        if self.base_resolution < 2 or self.time_resolution < 2:
            raise InvalidParameterError("plane resolutions must be at least 2")
        if not self.scales or any(s < 1 for s in self.scales):
            raise InvalidParameterError("scales must be positive integers")
        for name in ("hidden_dim", "merge_width", "feature_dim", "head_width", "semantic_dim"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if isinstance(getattr(self, f.name), tuple)
                         else getattr(self, f.name)) for f in fields(self)}

    def plane_shape(self, scale: int, pair: tuple[int, int]) -> tuple[int, int, int]:
        # time axis keeps its base resolution at every scale
        res = [self.base_resolution * scale] * 3 + [self.time_resolution]
        return res[pair[0]], res[pair[1]], self.hidden_dim


class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, prefix: str, sizes: list[int], rng: np.random.Generator, zero_last=False):
        self.prefix = prefix
        self.sizes = list(sizes)
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.params[f"{prefix}.w{i}"] = w
            self.params[f"{prefix}.b{i}"] = b

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ self.params[f"{self.prefix}.w{i}"] + self.params[f"{self.prefix}.b{i}"]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad: np.ndarray):
        grads = {}
        g = grad
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (acts[i + 1] > 0.0)
            grads[f"{self.prefix}.w{i}"] = acts[i].T @ g
            grads[f"{self.prefix}.b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"{self.prefix}.w{i}"].T
        return g, grads


@dataclass
class DeformedGaussians:
    """Time-conditioned Gaussians; scales, rotations and opacities pass through."""

    positions: np.ndarray
    sh_coeffs: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    semantic: np.ndarray
    active_sh_degree: int = 0
    offsets: np.ndarray | None = None
    sh_offsets: np.ndarray | None = None


@dataclass
class FieldRecord:
    n: int
    raw: np.ndarray           # (N, 4) unnormalized coordinates
    coords: np.ndarray        # (N, 4) normalized, clamped
    inside: np.ndarray        # (N, 4) bool, not clamped
    lookups: dict = field(default_factory=dict)
    queries: dict = field(default_factory=dict)
    merge_acts: list = field(default_factory=list)
    head_acts: dict = field(default_factory=dict)


class HexPlaneField:
    """Multi-resolution HexPlane encoder, merge MLP and decoder heads."""

    def __init__(self, config: FieldConfig, bounds: SceneBounds, seed: int = 0):
        self.config = config
        self.bounds = bounds
        rng = np.random.default_rng(seed)
        self.planes: dict[str, np.ndarray] = {}
        lo, hi = config.spatial_init
        for s in config.scales:
            for name, pair in zip(PLANE_NAMES, PLANE_PAIRS):
                shape = config.plane_shape(s, pair)
                if name in TEMPORAL_PLANES:
                    plane = np.ones(shape)
                else:
                    plane = rng.uniform(lo, hi, size=shape)
                self.planes[self.plane_key(s, name)] = plane
        n_sh = num_sh_coeffs(config.sh_degree) * 3
        d_in = len(config.scales) * config.hidden_dim
        self.merge = MLP("merge", [d_in, config.merge_width, config.feature_dim], rng)
        self.head_x = MLP("head_x", [config.feature_dim, config.head_width, 3], rng, zero_last=True)
        self.head_sh = MLP("head_sh", [config.feature_dim, config.head_width, n_sh], rng, zero_last=True)
        self.head_sem = MLP("head_sem", [config.feature_dim, config.head_width, config.semantic_dim], rng)
        self._record: FieldRecord | None = None

    @staticmethod
    def plane_key(scale: int, name: str) -> str:
        return f"plane.{scale}.{name}"

    @property
    def mlps(self) -> tuple[MLP, ...]:
        return (self.merge, self.head_x, self.head_sh, self.head_sem)

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.planes)
        for mlp in self.mlps:
            out.update(mlp.params)
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        current = self.params()
        if set(params) != set(current):
            raise InvalidParameterError("field parameter names do not match")
        for key, value in params.items():
            if value.shape != current[key].shape:
                raise InvalidParameterError(f"shape mismatch for {key}")
            current[key][...] = value

    def copy(self) -> "HexPlaneField":
        other = HexPlaneField.__new__(HexPlaneField)
        other.config = self.config
        other.bounds = self.bounds
        other.planes = {k: v.copy() for k, v in self.planes.items()}
        other.merge, other.head_x, other.head_sh, other.head_sem = (
            _copy_mlp(m) for m in self.mlps)
        other._record = None
        return other

    def encode(self, xyz: np.ndarray, t) -> np.ndarray:
        """Merged field feature f(x, y, z, t) for (N, 3) points."""
        feat, _ = self._encode(np.atleast_2d(xyz), t)
        return feat

    def _encode(self, xyz: np.ndarray, t):
        xyz = np.asarray(xyz, dtype=np.float64)
        n = xyz.shape[0]
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        raw = np.column_stack([xyz, tt])
        scaled = (raw - self.bounds.lower) / (self.bounds.upper - self.bounds.lower)
        coords = np.clip(scaled, 0.0, 1.0)
        rec = FieldRecord(n=n, raw=raw, coords=coords, inside=(scaled > 0.0) & (scaled < 1.0))
        fused = []
        for s in self.config.scales:
            prod = np.ones((n, self.config.hidden_dim))
            for name, (i, j) in zip(PLANE_NAMES, PLANE_PAIRS):
                key = self.plane_key(s, name)
                q, i0, j0, fi, fj = K.plane_query(self.planes[key], coords[:, i].copy(), coords[:, j].copy())
                rec.lookups[key] = (i0, j0, fi, fj)
                rec.queries[key] = q
                prod = prod * q
            fused.append(prod)
        feat, rec.merge_acts = self.merge.forward(np.concatenate(fused, axis=1))
        return feat, rec

    def forward(self, positions: np.ndarray, t: float):
        """Offsets and semantics for every Gaussian; records state for ``backward``."""
        feat, rec = self._encode(positions, t)
        dx, rec.head_acts["head_x"] = self.head_x.forward(feat)
        if self.config.defer_color:
            dsh, rec.head_acts["head_sh"] = self.head_sh.forward(feat)
        else:
            dsh = np.zeros((rec.n, self.head_sh.sizes[-1]))
        sem, rec.head_acts["head_sem"] = self.head_sem.forward(feat)
        self._record = rec
        return dx, dsh.reshape(rec.n, -1, 3), sem

    def backward(self, grad_dx, grad_dsh=None, grad_sem=None, record: FieldRecord | None = None):
        """Reverse-mode gradients of the last ``forward``.

        Returns ``(param_grads, grad_positions)``; parameters without a
        contribution get zero arrays.
        """
        rec = record if record is not None else self._record
        if rec is None:
            raise FieldStateError("field backward called before any forward pass")
        n = rec.n
        grads = {k: np.zeros_like(v) for k, v in self.params().items()}
        g_feat = np.zeros((n, self.config.feature_dim))
        heads = [(self.head_x, grad_dx)]
        if self.config.defer_color and grad_dsh is not None:
            heads.append((self.head_sh, np.asarray(grad_dsh).reshape(n, -1)))
        if grad_sem is not None:
            heads.append((self.head_sem, grad_sem))
        for mlp, g in heads:
            if g is None:
                continue
            g_in, g_params = mlp.backward(rec.head_acts[mlp.prefix], np.asarray(g, dtype=np.float64))
            g_feat += g_in
            grads.update(g_params)

        g_fused, g_merge = self.merge.backward(rec.merge_acts, g_feat)
        grads.update(g_merge)

        d = self.config.hidden_dim
        g_coords = np.zeros((n, 4))
        for si, s in enumerate(self.config.scales):
            g_prod = g_fused[:, si * d:(si + 1) * d]
            keys = [self.plane_key(s, name) for name in PLANE_NAMES]
            qs = [rec.queries[k] for k in keys]
            # product of all other planes via prefix/suffix products
            prefix = [np.ones((n, d))]
            for q in qs[:-1]:
                prefix.append(prefix[-1] * q)
            suffix = np.ones((n, d))
            for p_idx in range(len(qs) - 1, -1, -1):
                key = keys[p_idx]
                g_q = g_prod * prefix[p_idx] * suffix
                suffix = suffix * qs[p_idx]
                i, j = PLANE_PAIRS[p_idx]
                i0, j0, fi, fj = rec.lookups[key]
                gu, gv = K.plane_backward(self.planes[key], grads[key], g_q, i0, j0, fi, fj)
                g_coords[:, i] += gu
                g_coords[:, j] += gv
        g_coords = np.where(rec.inside, g_coords, 0.0)
        g_pos = g_coords[:, :3] / (self.bounds.aabb_max - self.bounds.aabb_min)
        return grads, g_pos

    def deform(self, scene: GaussianSet, t: float) -> DeformedGaussians:
        dx, dsh, sem = self.forward(scene.positions, t)
        return DeformedGaussians(
            positions=scene.positions + dx,
            sh_coeffs=scene.sh_coeffs + dsh,
            log_scales=scene.log_scales,
            rotations=scene.rotations,
            opacity_logits=scene.opacity_logits,
            semantic=sem,
            active_sh_degree=scene.active_sh_degree,
            offsets=dx,
            sh_offsets=dsh,
        )

    def clear(self) -> None:
        self._record = None


def _copy_mlp(mlp: MLP) -> MLP:
    out = MLP.__new__(MLP)
    out.prefix = mlp.prefix
    out.sizes = list(mlp.sizes)
    out.params = {k: v.copy() for k, v in mlp.params.items()}
    return out


def deform(scene: GaussianSet, t: float, hexfield: HexPlaneField) -> DeformedGaussians:
    return hexfield.deform(scene, t)


def tv_loss(planes: dict[str, np.ndarray]) -> float:
    """Mean squared difference of neighbouring lattice entries, summed over planes and axes."""
    total = 0.0
    for plane in planes.values():
        for axis in (0, 1):
            if plane.shape[axis] > 1:
                diff = np.diff(plane, axis=axis)
                total += float(np.mean(diff * diff))
    return total


def tv_loss_grad(planes: dict[str, np.ndarray], weight: float = 1.0):
    """TV value and ``weight`` times its gradient for each plane."""
    total = 0.0
    grads = {}
    for key, plane in planes.items():
        g = np.zeros_like(plane)
        for axis in (0, 1):
            if plane.shape[axis] > 1:
                diff = np.diff(plane, axis=axis)
                total += float(np.mean(diff * diff))
                gd = (2.0 * weight / diff.size) * diff
                if axis == 0:
                    g[1:] += gd
                    g[:-1] -= gd
                else:
                    g[:, 1:] += gd
                    g[:, :-1] -= gd
        grads[key] = g
    return total, grads
