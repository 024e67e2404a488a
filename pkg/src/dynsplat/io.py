"""File formats: checkpoints, point clouds, raw float arrays, PNG images and masks.

Checkpoint layout (little-endian)::

    b"S3GS" | u32 version | u64 N | u32 sh_degree | u32 active_sh_degree
    positions (N,3) f64 | log_scales (N,3) f64 | rotations (N,4) f64
    opacity_logits (N,) f64 | sh_coeffs (N,K,3) f64
    then zero or more sections: 4-byte tag | u64 payload length | payload

A section payload is ``u64 json length | JSON header | f64 arrays`` where the
JSON header lists ``arrays: [[name, shape], ...]`` in storage order.

Raw arrays (depth, semantic maps) are ``u32 H | u32 W`` followed by
``H * W * C`` float32 values in row-major order; ``C`` follows from the
payload size.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CheckpointError, LoadError
from .field import FieldConfig, HexPlaneField, SceneBounds
from .gaussians import GaussianSet, num_sh_coeffs

MAGIC = b"S3GS"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")
_SECTION = struct.Struct("<4sQ")


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_section(tag: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta = dict(meta)
    meta["arrays"] = [[name, list(arr.shape)] for name, arr in arrays.items()]
    head = json.dumps(meta, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    payload = struct.pack("<Q", len(head)) + head + body
    return _SECTION.pack(tag, len(payload)) + payload


def _unpack_section(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    (hlen,) = struct.unpack_from("<Q", payload, 0)
    meta = json.loads(payload[8:8 + hlen])
    offset = 8 + hlen
    arrays = {}
    for name, shape in meta.pop("arrays"):
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(payload):
            raise CheckpointError(f"section truncated at array {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset) \
            .reshape(shape).astype(np.float64)
        offset += 8 * count
    return meta, arrays


@dataclass
class Checkpoint:
    scene: GaussianSet
    hexfield: HexPlaneField | None = None
    meta: dict = field(default_factory=dict)


def encode_checkpoint(scene: GaussianSet, hexfield: HexPlaneField | None = None,
                      meta: dict | None = None) -> bytes:
    scene.validate()
    parts = [_HEADER.pack(MAGIC, VERSION, scene.n, scene.sh_degree, scene.active_sh_degree)]
    for name in GaussianSet.PARAM_NAMES:
        parts.append(np.ascontiguousarray(getattr(scene, name), dtype="<f8").tobytes())
    if hexfield is not None:
        parts.append(_pack_section(
            b"FELD",
            {"config": hexfield.config.to_dict(), "bounds": hexfield.bounds.to_dict()},
            hexfield.params(),
        ))
    if meta:
        parts.append(_pack_section(b"META", {"meta": meta}, {}))
    return b"".join(parts)


def save_checkpoint(path, scene: GaussianSet, hexfield: HexPlaneField | None = None,
                    meta: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(scene, hexfield, meta))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, n, degree, active = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    k = num_sh_coeffs(degree)
    shapes = {"positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
              "opacity_logits": (n,), "sh_coeffs": (n, k, 3)}
    offset = _HEADER.size
    arrays = {}
    for name in GaussianSet.PARAM_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise CheckpointError(f"checkpoint truncated in {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset) \
            .reshape(shape).astype(np.float64)
        offset += 8 * count
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise CheckpointError(f"non-finite values in {name}")
    scene = GaussianSet(sh_degree=degree, active_sh_degree=active, **arrays)

    hexfield, meta = None, {}
    while offset < len(data):
        if offset + _SECTION.size > len(data):
            raise CheckpointError("truncated section header")
        tag, length = _SECTION.unpack_from(data, offset)
        offset += _SECTION.size
        if offset + length > len(data):
            raise CheckpointError(f"section {tag!r} truncated")
        sec_meta, sec_arrays = _unpack_section(data[offset:offset + length])
        offset += length
        if tag == b"FELD":
            for name, arr in sec_arrays.items():
                if not np.isfinite(arr).all():
                    raise CheckpointError(f"non-finite values in field array {name}")
            config = FieldConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in sec_meta["config"].items()})
            hexfield = HexPlaneField(config, SceneBounds.from_dict(sec_meta["bounds"]))
            hexfield.set_params(sec_arrays)
        elif tag == b"META":
            meta = sec_meta["meta"]
        else:
            raise CheckpointError(f"unknown section tag {tag!r}")
    return Checkpoint(scene, hexfield, meta)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> np.ndarray:
    """Read vertex positions from a binary little-endian PLY file."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise LoadError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise LoadError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise LoadError(f"{path}: unknown property type {tok[1]}")
                elements[-1][2].append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise LoadError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
    offset = body_start
    for name, count, props in elements:
        if any(t is None for _, t in props):
            raise LoadError(f"{path}: list properties are not supported (element {name})")
        dtype = np.dtype([(p, t) for p, t in props])
        if name == "vertex":
            names = [p for p, _ in props]
            if not {"x", "y", "z"} <= set(names):
                raise LoadError(f"{path}: vertex element lacks x, y, z")
            if any(dtype[c] != np.dtype("<f4") for c in "xyz"):
                raise LoadError(f"{path}: x, y, z must be float32")
            if offset + dtype.itemsize * count > len(data):
                raise LoadError(f"{path}: truncated vertex data")
            rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            return _check_points(pts, path)
        offset += dtype.itemsize * count
    raise LoadError(f"{path}: no vertex element")


def write_ply(path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4")
    header = (f"ply\nformat binary_little_endian 1.0\nelement vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    atomic_write(path, header.encode("ascii") + pts.tobytes())


def read_xyz(path) -> np.ndarray:
    """Read whitespace-delimited ``x y z`` rows; extra columns are ignored."""
    try:
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    except ValueError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    if pts.shape[1] < 3:
        raise LoadError(f"{path}: expected at least 3 columns")
    return _check_points(pts[:, :3], path)


def write_xyz(path, points: np.ndarray) -> None:
    lines = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(points, dtype=np.float64).tolist())
    atomic_write(path, lines.encode())


def read_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def _check_points(pts: np.ndarray, path) -> np.ndarray:
    if not np.isfinite(pts).all():
        raise LoadError(f"{path}: non-finite point coordinates")
    return pts


def write_raw(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim not in (2, 3):
        raise ValueError("raw arrays must be H x W or H x W x C")
    atomic_write(path, struct.pack("<II", arr.shape[0], arr.shape[1]) + arr.tobytes())


def read_raw(path) -> np.ndarray:
    """Read a raw float32 array; returns (H, W) for one channel, else (H, W, C)."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise LoadError(f"{path}: missing shape header")
    h, w = struct.unpack_from("<II", data, 0)
    n = (len(data) - 8) // 4
    if h * w == 0:
        if len(data) > 8:
            raise LoadError(f"{path}: payload present for an empty {h}x{w} array")
        return np.zeros((h, w))
    if (len(data) - 8) % 4 or n % (h * w):
        raise LoadError(f"{path}: payload size does not match header {h}x{w}")
    c = n // (h * w)
    arr = np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)
    if not np.isfinite(arr).all():
        raise LoadError(f"{path}: non-finite values")
    return arr.reshape(h, w) if c == 1 else arr.reshape(h, w, c)


def write_png(path, rgb: np.ndarray) -> None:
    """Save a float RGB image in [0, 1] (clamped) as 8-bit PNG."""
    img = (np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Load an image as float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def write_mask(path, mask: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.convert("1", dither=Image.Dither.NONE).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from exc
