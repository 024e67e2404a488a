"""Dynamic-scene reconstruction with deformable 3D Gaussians and a HexPlane field."""

import numba

# Prefer OpenMP; older TBB builds trigger a warning and are skipped anyway.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

from .camera import CameraModel, look_at  # noqa: E402
from .data import Box3D, FrameRecord, SceneDataset, boxes_to_mask, load_manifest, split_train_test, write_manifest  # noqa: E402
from .errors import (  # noqa: E402
    CheckpointError,
    EmptyInitializationError,
    FieldStateError,
    InvalidParameterError,
    LoadError,
    NonFiniteLossError,
    RenderDiagnosticsError,
)
from .field import DeformedGaussians, FieldConfig, HexPlaneField, SceneBounds, deform, tv_loss  # noqa: E402
from .gaussians import GaussianSet, build_covariance, densify_and_prune, eval_sh, init_from_points  # noqa: E402
from .losses import LossBreakdown, LossWeights, masked_psnr, psnr, ssim, total_loss  # noqa: E402
from .rasterizer import RenderOutput, project, render, render_backward  # noqa: E402
from .trainer import TrainConfig, chain_clips, train_clip, warmup  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Box3D", "CameraModel", "CheckpointError", "DeformedGaussians", "EmptyInitializationError",
    "FieldConfig", "FieldStateError", "FrameRecord", "GaussianSet", "HexPlaneField",
    "InvalidParameterError", "LoadError", "LossBreakdown", "LossWeights", "NonFiniteLossError",
    "RenderDiagnosticsError", "RenderOutput", "SceneBounds", "SceneDataset", "TrainConfig",
    "boxes_to_mask", "build_covariance", "chain_clips", "deform", "densify_and_prune", "eval_sh",
    "init_from_points", "load_manifest", "look_at", "masked_psnr", "project", "psnr", "render",
    "render_backward", "split_train_test", "ssim", "total_loss", "train_clip", "tv_loss",
    "warmup", "write_manifest",
]
