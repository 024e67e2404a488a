"""Run configuration: a flat schema of dotted keys loaded from TOML/JSON with overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import tomli

from .errors import InvalidParameterError
from .field import FieldConfig
from .losses import LossWeights
from .trainer import TrainConfig


class ConfigError(InvalidParameterError):
    pass


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _opt(parse):
    def inner(v):
        return None if v is None else parse(v)
    return inner


def _int_list(v):
    if not isinstance(v, (list, tuple)) or not v:
        raise ValueError("expected a non-empty list of integers")
    return tuple(_int(x) for x in v)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[Any], Any]
    default: Any
    help: str


_T, _F, _W = TrainConfig(), FieldConfig(), LossWeights()

SCHEMA: dict[str, Key] = {k.name: k for k in [
    Key("train.total_iters", _int, _T.total_iters, "iterations over the whole sequence (split across clips)"),
    Key("train.warmup_iters", _int, _T.warmup_iters, "static Gaussian-only iterations at the start of each clip"),
    Key("train.clip_length_frames", _int, _T.clip_length_frames, "frames per clip when chaining clips"),
    Key("train.field_lr_start", _float, _T.field_lr_start, "field learning rate at the start of joint training"),
    Key("train.field_lr_end", _float, _T.field_lr_end, "field learning rate at the end (exponential decay)"),
    Key("train.position_lr_start", _float, _T.position_lr_start, "position learning rate, times scene extent"),
    Key("train.position_lr_end", _float, _T.position_lr_end, "final position learning rate, times scene extent"),
    Key("train.sh_lr", _float, _T.sh_lr, "learning rate of the DC SH coefficients"),
    Key("train.sh_rest_divisor", _float, _T.sh_rest_divisor, "higher SH bands use sh_lr divided by this"),
    Key("train.opacity_lr", _float, _T.opacity_lr, "opacity-logit learning rate"),
    Key("train.scale_lr", _float, _T.scale_lr, "log-scale learning rate"),
    Key("train.rotation_lr", _float, _T.rotation_lr, "quaternion learning rate"),
    Key("train.scene_extent", _opt(_float), _T.scene_extent, "scene extent in meters (null: from cameras)"),
    Key("train.densify_interval", _int, _T.densify_interval, "iterations between densify/prune passes"),
    Key("train.densify_from", _opt(_int), _T.densify_from, "first densify iteration (null: scaled default)"),
    Key("train.densify_until", _opt(_int), _T.densify_until, "last densify iteration (null: scaled default)"),
    Key("train.opacity_reset_interval", _opt(_int), _T.opacity_reset_interval,
        "iterations between opacity resets (null: scaled default)"),
    Key("train.densify_grad_threshold", _float, _T.densify_grad_threshold,
        "mean screen-space gradient norm that triggers clone/split"),
    Key("train.percent_dense", _float, _T.percent_dense, "clone/split size boundary as a fraction of extent"),
    Key("train.min_opacity", _float, _T.min_opacity, "Gaussians below this opacity are pruned"),
    Key("train.sh_degree", _int, _T.sh_degree, "maximum SH degree"),
    Key("train.sh_increment_interval", _int, _T.sh_increment_interval, "iterations per SH degree increase"),
    Key("train.voxel_size", _float, _T.voxel_size, "point-cloud voxel size for initialization, meters"),
    Key("train.every_nth", _int, _T.every_nth, "every n-th frame is held out for testing"),
    Key("train.log_interval", _int, _T.log_interval, "iterations between JSON log lines"),
    Key("train.use_field", _bool, _T.use_field, "false trains a static scene only"),
    Key("train.seed", _int, _T.seed, "random seed"),
    Key("field.base_resolution", _int, _F.base_resolution, "spatial plane resolution at scale 1"),
    Key("field.time_resolution", _int, _F.time_resolution, "temporal plane resolution"),
    Key("field.scales", _int_list, _F.scales, "spatial upsampling scales"),
    Key("field.hidden_dim", _int, _F.hidden_dim, "feature channels per plane"),
    Key("field.merge_width", _int, _F.merge_width, "hidden width of the merge MLP"),
    Key("field.feature_dim", _int, _F.feature_dim, "output width of the merge MLP"),
    Key("field.head_width", _int, _F.head_width, "hidden width of each decoder head"),
    Key("field.semantic_dim", _int, _F.semantic_dim, "semantic feature channels"),
    Key("field.defer_color", _bool, _F.defer_color, "enable the SH-offset head"),
    Key("loss.rgb", _float, _W.rgb, "weight of the L1 color loss"),
    Key("loss.depth", _float, _W.depth, "weight of the sparse depth loss"),
    Key("loss.feat", _float, _W.feat, "weight of the semantic feature loss"),
    Key("loss.ssim", _float, _W.ssim, "weight of the 1 - SSIM loss"),
    Key("loss.tv", _float, _W.tv, "weight of the plane total-variation loss"),
    Key("loss.reg_x", _float, _W.reg_x, "weight of the position-offset regularizer"),
    Key("loss.reg_c", _float, _W.reg_c, "weight of the SH-offset regularizer"),
]}


def describe_keys() -> str:
    lines = ["configuration keys (set in --config files or with --set key=value):"]
    for key in SCHEMA.values():
        lines.append(f"  {key.name} = {json.dumps(key.default)}  {key.help}")
    return "\n".join(lines)


def _flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


class RunConfig:
    """Validated flat mapping of dotted keys to values."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {name: key.default for name, key in SCHEMA.items()}
        self.update(values or {})

    def update(self, values: dict[str, Any]) -> None:
        for name, raw in values.items():
            if name not in SCHEMA:
                raise ConfigError(f"unknown config key {name!r}")
            try:
                self.values[name] = SCHEMA[name].parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc} (got {raw!r})") from exc
        self.to_train_config()  # cross-field checks

    def __getitem__(self, name: str):
        return self.values[name]

    def section(self, prefix: str) -> dict[str, Any]:
        return {k[len(prefix) + 1:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def to_train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                **self.section("train"),
                weights=LossWeights(**self.section("loss")),
                field_config=FieldConfig(**self.section("field")),
            )
        except InvalidParameterError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}


def load_config_file(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix.lower() == ".json" else tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a table/object")
    return _flatten(doc)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``key=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    values = load_config_file(path) if path else {}
    for item in overrides or []:
        key, value = parse_override(item)
        values[key] = value
    return RunConfig(values)
