import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_scene
from dynsplat import io
from dynsplat.errors import CheckpointError, LoadError
from dynsplat.field import FieldConfig, HexPlaneField, SceneBounds

TINY_FIELD = FieldConfig(base_resolution=3, time_resolution=2, scales=(1,), hidden_dim=2,
                         merge_width=4, feature_dim=4, head_width=4, sh_degree=1)


def _field(seed=0):
    f = HexPlaneField(TINY_FIELD, SceneBounds([-1, -1, -1], [1, 1, 1], 0.2, 0.7), seed=seed)
    rng = np.random.default_rng(seed)
    for v in f.params().values():
        v[...] = rng.normal(size=v.shape)
    return f


def test_checkpoint_round_trip_is_exact(tmp_path):
    scene = random_scene(np.random.default_rng(0), 9, sh_degree=1)
    scene.active_sh_degree = 0
    f = _field()
    path = tmp_path / "a.ckpt"
    io.save_checkpoint(path, scene, f, {"time_range": [0.2, 0.7], "note": "x"})
    ck = io.load_checkpoint(path)
    for name in scene.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(ck.scene, name), getattr(scene, name))
    assert ck.scene.active_sh_degree == 0 and ck.scene.sh_degree == 1
    assert ck.meta == {"time_range": [0.2, 0.7], "note": "x"}
    for key, v in f.params().items():
        np.testing.assert_array_equal(ck.hexfield.params()[key], v)
    assert ck.hexfield.bounds.t_min == 0.2
    # re-encoding the decoded checkpoint gives the same bytes
    assert io.encode_checkpoint(ck.scene, ck.hexfield, ck.meta) == path.read_bytes()


def test_checkpoint_without_field():
    scene = random_scene(np.random.default_rng(1), 3)
    ck = io.decode_checkpoint(io.encode_checkpoint(scene))
    assert ck.hexfield is None and ck.meta == {}


def test_checkpoint_rejects_bad_inputs(tmp_path):
    scene = random_scene(np.random.default_rng(1), 3)
    data = io.encode_checkpoint(scene)
    with pytest.raises(CheckpointError, match="magic"):
        io.decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        io.decode_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        io.decode_checkpoint(data[:-8])
    bad = bytearray(data)
    bad[io._HEADER.size:io._HEADER.size + 8] = struct.pack("<d", float("nan"))
    with pytest.raises(CheckpointError, match="non-finite"):
        io.decode_checkpoint(bytes(bad))
    with pytest.raises(CheckpointError):
        io.load_checkpoint(tmp_path / "missing.ckpt")


def test_ply_round_trip_is_float32(tmp_path):
    pts = np.random.default_rng(2).normal(size=(50, 3))
    io.write_ply(tmp_path / "p.ply", pts)
    back = io.read_points(tmp_path / "p.ply")
    np.testing.assert_array_equal(back, pts.astype(np.float32).astype(np.float64))


def test_ply_with_extra_properties(tmp_path):
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1")])
    rec = np.zeros(2, dtype=dtype)
    rec["x"], rec["z"], rec["red"] = [1, 2], [3, 4], [255, 7]
    header = (b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 2\n"
              b"property float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n")
    (tmp_path / "c.ply").write_bytes(header + rec.tobytes())
    np.testing.assert_array_equal(io.read_ply(tmp_path / "c.ply"), [[1, 0, 3], [2, 0, 4]])


def test_ply_errors(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(LoadError, match="binary_little_endian"):
        io.read_ply(tmp_path / "a.ply")
    (tmp_path / "b.ply").write_bytes(b"not a ply")
    with pytest.raises(LoadError):
        io.read_ply(tmp_path / "b.ply")


def test_xyz_round_trip(tmp_path):
    pts = np.random.default_rng(3).normal(size=(10, 3))
    io.write_xyz(tmp_path / "p.xyz", pts)
    np.testing.assert_array_equal(io.read_points(tmp_path / "p.xyz"), pts)


@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_raw_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("raw") / "a.bin"
    io.write_raw(path, arr)
    back = io.read_raw(path)
    expect = arr[:, :, 0] if arr.shape[2] == 1 else arr
    np.testing.assert_array_equal(back, expect)
    assert path.stat().st_size == 8 + 4 * arr.size


def test_raw_rejects_mismatched_payload(tmp_path):
    (tmp_path / "x.bin").write_bytes(struct.pack("<II", 2, 2) + b"\0" * 12)
    with pytest.raises(LoadError):
        io.read_raw(tmp_path / "x.bin")


def test_png_and_mask_round_trip(tmp_path):
    img = np.random.default_rng(4).integers(0, 256, (5, 6, 3)) / 255.0
    io.write_png(tmp_path / "i.png", img)
    np.testing.assert_allclose(io.read_png(tmp_path / "i.png"), img, atol=1e-12)
    mask = np.random.default_rng(5).uniform(size=(7, 9)) > 0.5
    io.write_mask(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(io.read_mask(tmp_path / "m.png"), mask)


def test_atomic_write_replaces(tmp_path):
    path = tmp_path / "sub" / "f.bin"
    io.atomic_write(path, b"one")
    io.atomic_write(path, b"two")
    assert path.read_bytes() == b"two"
    assert [p.name for p in path.parent.iterdir()] == ["f.bin"]
