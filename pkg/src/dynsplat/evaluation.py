"""Evaluation reports and static/dynamic decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses as L
from .field import HexPlaneField
from .gaussians import GaussianSet
from .trainer import FrameData, dynamic_scores, render_frame


@dataclass
class ClipModel:
    scene: GaussianSet
    field: HexPlaneField | None
    time_range: tuple[float, float] = (0.0, 1.0)

    def covers(self, t: float) -> bool:
        return self.time_range[0] - 1e-12 <= t <= self.time_range[1] + 1e-12


def pick_model(models: list[ClipModel], t: float) -> ClipModel:
    """The clip whose time range contains ``t``, else the one with the nearest range."""
    for m in models:
        if m.covers(t):
            return m
    return min(models, key=lambda m: min(abs(t - m.time_range[0]), abs(t - m.time_range[1])))


def json_number(x: float):
    """Finite floats pass through; infinities become the strings "inf" / "-inf"."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def evaluate(models: list[ClipModel], frames: list[FrameData]) -> dict:
    """Per-frame and mean PSNR/SSIM, plus masked variants when every frame has a mask."""
    with_masks = bool(frames) and all(f.mask is not None and f.mask.any() for f in frames)
    per_frame = []
    sums: dict[str, list[float]] = {"psnr": [], "ssim": []}
    if with_masks:
        sums.update({"psnr_masked": [], "ssim_masked": []})
    for f in frames:
        m = pick_model(models, f.time)
        rgb = np.clip(render_frame(m.scene, m.field, f.camera, f.time).rgb, 0.0, 1.0)
        entry = {"frame": f.index, "time": f.time,
                 "psnr": L.psnr(rgb, f.rgb), "ssim": L.ssim(rgb, f.rgb)}
        if with_masks:
            entry["psnr_masked"] = L.masked_psnr(rgb, f.rgb, f.mask)
            entry["ssim_masked"] = L.masked_ssim(rgb, f.rgb, f.mask)
        for key in sums:
            sums[key].append(entry[key])
        per_frame.append(entry)
    mean = {key: float(np.mean(vals)) for key, vals in sums.items()}
    return {
        "n_frames": len(frames),
        "mean": {k: json_number(v) for k, v in mean.items()},
        "frames": [{k: json_number(v) if isinstance(v, float) else v for k, v in e.items()}
                   for e in per_frame],
    }


def decompose(scene: GaussianSet, hexfield: HexPlaneField | None, threshold: float,
              n_times: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic scores and the boolean dynamic mask (score >= threshold)."""
    scores = dynamic_scores(scene, hexfield, n_times)
    return scores, scores >= threshold


def separation_ratio(scores: np.ndarray, inside: np.ndarray) -> float:
    """Mean score of Gaussians inside the dynamic region over the mean outside."""
    inside = np.asarray(inside, dtype=bool)
    if not inside.any() or inside.all():
        return float("nan")
    outside_mean = float(scores[~inside].mean())
    inside_mean = float(scores[inside].mean())
    return math.inf if outside_mean == 0 else inside_mean / outside_mean
