"""Optimization schedule: static warm-up, joint training with the field, clip chaining."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, TextIO

import numpy as np

from . import losses as L
from .camera import CameraModel
from .data import SceneDataset, split_train_test
from .errors import InvalidParameterError, RenderDiagnosticsError
from .field import FieldConfig, HexPlaneField, SceneBounds, tv_loss_grad
from .gaussians import DensifyOptions, GaussianSet, densify_and_prune, init_from_points, reset_opacity
from .optim import Adam
from .rasterizer import RenderOutput, pad_sh_grad, render, render_backward

# 3DGS reference schedule, expressed for its 30k-iteration budget and scaled
# to the actual per-clip budget when not set explicitly.
_REF_ITERS = 30000
_REF_DENSIFY_FROM = 500
_REF_DENSIFY_UNTIL = 15000
_REF_OPACITY_RESET = 3000


@dataclass
class TrainConfig:
    total_iters: int = 50000
    warmup_iters: int = 5000
    clip_length_frames: int = 50
    field_lr_start: float = 1.6e-3
    field_lr_end: float = 1.6e-4
    position_lr_start: float = 1.6e-4
    position_lr_end: float = 1.6e-6
    sh_lr: float = 2.5e-3
    sh_rest_divisor: float = 20.0
    opacity_lr: float = 5e-2
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    scene_extent: float | None = None
    densify_interval: int = 100
    densify_from: int | None = None
    densify_until: int | None = None
    opacity_reset_interval: int | None = None
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    sh_degree: int = 3
    sh_increment_interval: int = 1000
    voxel_size: float = 0.15
    every_nth: int = 10
    log_interval: int = 100
    use_field: bool = True
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    field_config: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.field_config, dict):
            self.field_config = FieldConfig(**self.field_config)
        self.validate()

    def validate(self) -> None:
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise InvalidParameterError("iteration counts must be non-negative")
        if self.total_iters > 0 and self.warmup_iters >= self.total_iters and self.use_field:
            raise InvalidParameterError("warmup_iters must be smaller than total_iters")
        if self.clip_length_frames < 2:
            raise InvalidParameterError("clip_length_frames must be at least 2")
        if not 0 <= self.sh_degree <= 3:
            raise InvalidParameterError("sh_degree must lie in [0, 3]")
        if self.every_nth < 2:
            raise InvalidParameterError("every_nth must be at least 2")
        if self.scene_extent is not None and self.scene_extent <= 0:
            raise InvalidParameterError("scene_extent must be positive")
        for name in ("field_lr_start", "field_lr_end", "position_lr_start", "position_lr_end",
                     "sh_lr", "opacity_lr", "scale_lr", "rotation_lr", "voxel_size"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidParameterError(f"{name} must be positive")
        if self.densify_interval < 1 or self.sh_increment_interval < 1 or self.log_interval < 1:
            raise InvalidParameterError("intervals must be positive")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["weights"] = self.weights.to_dict()
        out["field_config"] = self.field_config.to_dict()
        return out

    def schedule(self, clip_iters: int) -> tuple[int, int, int]:
        """Densify start/stop and opacity-reset interval for a clip budget."""
        scale = clip_iters / _REF_ITERS
        start = self.densify_from if self.densify_from is not None else round(_REF_DENSIFY_FROM * scale)
        stop = self.densify_until if self.densify_until is not None else round(_REF_DENSIFY_UNTIL * scale)
        reset = (self.opacity_reset_interval if self.opacity_reset_interval is not None
                 else max(1, round(_REF_OPACITY_RESET * scale)))
        return start, stop, reset


def camera_extent(cameras: list[CameraModel]) -> float:
    """1.1 x the largest camera distance from the mean camera center (3DGS rule)."""
    centers = np.array([c.center for c in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
    return 1.1 * max(radius, 1e-6) if radius > 0 else 1.0


def expon_lr(start: float, end: float, step: int, n_steps: int) -> float:
    """Log-linear interpolation from ``start`` to ``end`` over ``n_steps``."""
    if n_steps <= 1:
        return start
    s = min(max(step / (n_steps - 1), 0.0), 1.0)
    return math.exp((1 - s) * math.log(start) + s * math.log(end))


@dataclass
class FrameData:
    index: int
    camera: CameraModel
    time: float
    rgb: np.ndarray
    depth: np.ndarray
    features: np.ndarray | None
    mask: np.ndarray | None


def load_frames(dataset: SceneDataset) -> list[FrameData]:
    return [FrameData(index=dataset.indices[i], camera=f.camera, time=f.time, rgb=f.load_image(),
                      depth=f.load_depth(), features=f.load_features(), mask=f.load_mask())
            for i, f in enumerate(dataset.frames)]


@dataclass
class StepResult:
    breakdown: L.LossBreakdown
    output: RenderOutput


def render_frame(scene: GaussianSet, hexfield: HexPlaneField | None, camera: CameraModel,
                 t: float) -> RenderOutput:
    """Render the (deformed, if a field is given) scene at normalized time ``t``."""
    if hexfield is None:
        out, _ = render(scene.positions, scene.log_scales, scene.rotations, scene.opacity_logits,
                        scene.sh_coeffs, camera, sh_degree=scene.active_sh_degree)
        return out
    d = hexfield.deform(scene, t)
    hexfield.clear()
    out, _ = render(d.positions, d.log_scales, d.rotations, d.opacity_logits, d.sh_coeffs,
                    camera, sh_degree=d.active_sh_degree, semantic=d.semantic)
    return out


def dynamic_scores(scene: GaussianSet, hexfield: HexPlaneField | None, n_times: int = 16) -> np.ndarray:
    """Time-averaged position-offset norm per Gaussian over uniformly spaced times."""
    if hexfield is None or scene.n == 0:
        return np.zeros(scene.n)
    lo, hi = hexfield.bounds.t_min, hexfield.bounds.t_max
    total = np.zeros(scene.n)
    for t in np.linspace(lo, hi, n_times):
        dx, _, _ = hexfield.forward(scene.positions, t)
        total += np.linalg.norm(dx, axis=1)
    hexfield.clear()
    return total / n_times


class Trainer:
    """Holds the scene, field and optimizer state of one clip."""

    def __init__(self, config: TrainConfig, frames: list[FrameData], scene: GaussianSet,
                 hexfield: HexPlaneField | None = None, clip_iters: int | None = None,
                 log: TextIO | Callable[[dict], None] | None = None, extent: float | None = None):
        if not frames:
            raise InvalidParameterError("no training frames")
        self.config = config
        self.frames = frames
        self.scene = scene.copy()
        self.field = hexfield
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.clip_iters = config.total_iters if clip_iters is None else clip_iters
        self.extent = extent if extent is not None else (
            config.scene_extent or camera_extent([f.camera for f in frames]))
        self.log = log
        self.history: list[dict] = []
        self.densify_start, self.densify_stop, self.reset_interval = config.schedule(self.clip_iters)
        self.gauss_opt = Adam(self._gauss_params(), self._gauss_lrs(0), unit_rows=("rotations",))
        self.field_opt = None
        self._field_step = 0
        self._field_iters = 1
        self._reset_stats()

    # parameter plumbing ------------------------------------------------

    def _gauss_lrs(self, step: int) -> dict[str, float]:
        c = self.config
        return {
            "positions": expon_lr(c.position_lr_start * self.extent, c.position_lr_end * self.extent,
                                  step, max(self.clip_iters, 1)),
            "log_scales": c.scale_lr,
            "rotations": c.rotation_lr,
            "opacity_logits": c.opacity_lr,
            "sh_dc": c.sh_lr,
            "sh_rest": c.sh_lr / c.sh_rest_divisor,
        }

    def _gauss_params(self) -> dict[str, np.ndarray]:
        s = self.scene
        return {
            "positions": s.positions, "log_scales": s.log_scales, "rotations": s.rotations,
            "opacity_logits": s.opacity_logits,
            "sh_dc": np.ascontiguousarray(s.sh_coeffs[:, :1]),
            "sh_rest": np.ascontiguousarray(s.sh_coeffs[:, 1:]),
        }

    def _reset_stats(self) -> None:
        self.grad_accum = np.zeros(self.scene.n)
        self.grad_count = np.zeros(self.scene.n)

    def enable_field(self, hexfield: HexPlaneField, joint_iters: int) -> None:
        self.field = hexfield
        lr = self.config.field_lr_start
        self.field_opt = Adam(hexfield.params(), {k: lr for k in hexfield.params()})
        self._field_step = 0
        self._field_iters = max(joint_iters, 1)

    # one iteration -----------------------------------------------------

    def step(self, joint: bool) -> StepResult:
        c, w = self.config, self.config.weights
        frame = self.frames[int(self.rng.integers(len(self.frames)))]
        scene = self.scene
        use_field = joint and self.field is not None
        if use_field:
            dx, dsh, sem = self.field.forward(scene.positions, frame.time)
            positions = scene.positions + dx
            sh = scene.sh_coeffs + dsh
        else:
            dx = dsh = sem = None
            positions, sh = scene.positions, scene.sh_coeffs
        try:
            out, record = render(positions, scene.log_scales, scene.rotations, scene.opacity_logits,
                                 sh, frame.camera, sh_degree=scene.active_sh_degree, semantic=sem)
        except RenderDiagnosticsError as exc:
            raise RenderDiagnosticsError(f"{exc} at iteration {self.iteration}", exc.index) from exc

        terms = {}
        terms["rgb"], g_rgb = L.l1_rgb_grad(out.rgb, frame.rgb)
        terms["ssim"], g_ssim = L.ssim_loss_grad(out.rgb, frame.rgb)
        terms["depth"], g_depth = L.depth_l2_grad(out.depth, frame.depth)
        g_sem = None
        tv_grads = None
        if use_field:
            if frame.features is not None:
                terms["feat"], g_sem = L.feat_l2_grad(out.semantic, frame.features)
            terms["tv"], tv_grads = tv_loss_grad(self.field.planes, w.tv)
            (terms["reg_x"], terms["reg_c"]), g_rx, g_rc = L.reg_offsets_grad(dx, dsh)
        breakdown = L.total_loss(terms, w, iteration=self.iteration)

        grads = render_backward(
            record, w.rgb * g_rgb + w.ssim * g_ssim, w.depth * g_depth,
            None if g_sem is None else w.feat * g_sem)
        g_sh = pad_sh_grad(grads.sh_coeffs, scene.sh_coeffs.shape[1])
        g_pos = grads.positions
        if use_field:
            f_grads, g_pos_field = self.field.backward(
                g_pos + w.reg_x * g_rx, g_sh + w.reg_c * g_rc, grads.semantic)
            for key, g in tv_grads.items():
                f_grads[key] += g
            g_pos = g_pos + g_pos_field

        # adaptive density statistics from the screen-space position gradient
        vis = grads.visible
        self.grad_accum[vis] += grads.viewspace_norm[vis]
        self.grad_count[vis] += 1

        self.gauss_opt.lrs = self._gauss_lrs(self.iteration)
        params = self._gauss_params()
        self.gauss_opt.step(params, {
            "positions": g_pos, "log_scales": grads.log_scales, "rotations": grads.rotations,
            "opacity_logits": grads.opacity_logits,
            "sh_dc": g_sh[:, :1], "sh_rest": g_sh[:, 1:],
        })
        scene.sh_coeffs[:, :1] = params["sh_dc"]
        scene.sh_coeffs[:, 1:] = params["sh_rest"]
        if use_field:
            lr = expon_lr(c.field_lr_start, c.field_lr_end, self._field_step, self._field_iters)
            self.field_opt.lrs = dict.fromkeys(self.field_opt.lrs, lr)
            self.field_opt.step(self.field.params(), f_grads)
            self._field_step += 1
            self.field.clear()

        self.iteration += 1
        self._maintain()
        if self.iteration % c.log_interval == 0 or self.iteration == 1:
            self._emit(breakdown, joint, out, frame)
        return StepResult(breakdown, out)

    def _maintain(self) -> None:
        c, it = self.config, self.iteration
        if it % c.sh_increment_interval == 0 and self.scene.active_sh_degree < self.scene.sh_degree:
            self.scene.active_sh_degree += 1
        if self.densify_start < it <= self.densify_stop:
            if it % c.densify_interval == 0:
                self.densify()
            if it % self.reset_interval == 0:
                self.scene = reset_opacity(self.scene)
                self.gauss_opt.reset("opacity_logits")

    def densify(self) -> None:
        c = self.config
        mean_grad = self.grad_accum / np.maximum(self.grad_count, 1)
        opts = DensifyOptions(grad_threshold=c.densify_grad_threshold, percent_dense=c.percent_dense,
                              min_opacity=c.min_opacity, scene_extent=self.extent)
        res = densify_and_prune(self.scene, mean_grad, opts, self.rng)
        self.scene = res.scene
        self.gauss_opt.remap_rows(res.origin)
        self._reset_stats()

    def _emit(self, breakdown: L.LossBreakdown, joint: bool, out: RenderOutput, frame: FrameData):
        entry = {
            "iteration": self.iteration,
            "phase": "joint" if joint else "warmup",
            "loss": breakdown.total,
            **{k: v for k, v in breakdown.terms.items()},
            "psnr": L.psnr(out.rgb, frame.rgb),
            "n_gaussians": self.scene.n,
            "lr": {"positions": self.gauss_opt.lrs["positions"],
                   "field": self.field_opt.lrs[next(iter(self.field_opt.lrs))] if (
                       joint and self.field_opt) else None},
        }
        self.history.append(entry)
        if self.log is None:
            return
        if callable(self.log):
            self.log(entry)
        else:
            self.log.write(json.dumps(entry) + "\n")

    def run(self, n_iters: int, joint: bool) -> None:
        for _ in range(n_iters):
            self.step(joint)


def initialize_scene(dataset: SceneDataset, config: TrainConfig) -> GaussianSet:
    if dataset.points is None:
        raise InvalidParameterError("dataset has no point cloud for initialization")
    return init_from_points(dataset.points, dataset.cameras, voxel_size=config.voxel_size,
                            sh_degree=config.sh_degree, seed=config.seed)


def make_field(scene: GaussianSet, config: TrainConfig, t_range: tuple[float, float]) -> HexPlaneField:
    bounds = SceneBounds.from_points(scene.positions, t_range[0], t_range[1])
    fc = replace(config.field_config, sh_degree=scene.sh_degree)
    return HexPlaneField(fc, bounds, seed=config.seed)


def _time_range(frames) -> tuple[float, float]:
    lo = min(f.time for f in frames)
    hi = max(f.time for f in frames)
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


def warmup(scene: GaussianSet, dataset: SceneDataset | list[FrameData], config: TrainConfig,
           log=None) -> Trainer:
    """Static training of the Gaussians only; returns the trainer holding the result."""
    frames = load_frames(dataset) if isinstance(dataset, SceneDataset) else dataset
    if not frames:
        raise InvalidParameterError("no training frames")
    trainer = Trainer(config, frames, scene, clip_iters=config.total_iters, log=log)
    trainer.run(config.warmup_iters, joint=False)
    return trainer


@dataclass
class ClipResult:
    scene: GaussianSet
    field: HexPlaneField | None
    time_range: tuple[float, float]
    frame_indices: list[int]
    history: list[dict] = field(default_factory=list)
    warmup_scene: GaussianSet | None = None


def train_clip(scene: GaussianSet, hexfield: HexPlaneField | None, frames: list[FrameData],
               config: TrainConfig, clip_iters: int | None = None, skip_warmup: bool = False,
               log=None, keep_warmup: bool = False,
               time_range: tuple[float, float] | None = None) -> ClipResult:
    """Warm-up (unless skipped) followed by joint scene and field training.

    ``clip_iters`` is the whole budget including warm-up. A ``None`` field is
    created fresh after warm-up, with zero-initialized offset heads. ``time_range``
    defaults to the span of the training frames.
    """
    if not frames:
        raise InvalidParameterError("no training frames")
    budget = config.total_iters if clip_iters is None else clip_iters
    trainer = Trainer(config, frames, scene, clip_iters=budget, log=log)
    t_range = _time_range(frames) if time_range is None else tuple(time_range)
    n_warm = 0 if skip_warmup else min(config.warmup_iters, budget)
    if not config.use_field:
        n_warm = budget
    trainer.run(n_warm, joint=False)
    warm_scene = trainer.scene.copy() if keep_warmup else None
    result_field = None
    if config.use_field:
        if hexfield is None:
            hexfield = make_field(trainer.scene, config, t_range)
        else:
            hexfield = hexfield.copy()
            hexfield.bounds = SceneBounds(hexfield.bounds.aabb_min, hexfield.bounds.aabb_max, *t_range)
        trainer.enable_field(hexfield, budget - n_warm)
        trainer.run(budget - n_warm, joint=True)
        result_field = trainer.field
    return ClipResult(trainer.scene, result_field, t_range, [f.index for f in frames],
                      trainer.history, warm_scene)


def split_clips(n_frames: int, clip_length: int) -> list[range]:
    return [range(s, min(s + clip_length, n_frames)) for s in range(0, n_frames, clip_length)]


def chain_clips(dataset: SceneDataset, config: TrainConfig, skip_warmup: bool = False,
                log=None, on_clip: Callable[[int, ClipResult], None] | None = None) -> list[ClipResult]:
    """Train consecutive clips; each clip's field starts as a copy of the previous one."""
    clips = split_clips(len(dataset), config.clip_length_frames)
    budget = config.total_iters // len(clips)
    results: list[ClipResult] = []
    prev_field = None
    for k, clip in enumerate(clips):
        clip_set = dataset.subset(clip)
        train, _ = split_train_test(clip_set, config.every_nth) if len(clip_set) > 1 else (clip_set, None)
        frames = load_frames(train if len(train) else clip_set)
        scene = initialize_scene(clip_set, config)
        res = train_clip(scene, prev_field, frames, config, clip_iters=budget,
                         skip_warmup=skip_warmup, log=log,
                         time_range=_time_range(clip_set.frames))
        results.append(res)
        prev_field = res.field
        if on_clip is not None:
            on_clip(k, res)
    return results


def config_snapshot(config: TrainConfig) -> dict:
    return json.loads(json.dumps(config.to_dict()))

