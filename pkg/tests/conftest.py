import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynsplat.camera import CameraModel, look_at
from dynsplat.gaussians import GaussianSet
from dynsplat.synthetic import SyntheticSceneSpec, synthesize

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def make_camera(width=16, height=16, focal=20.0, w2c=None):
    return CameraModel(fx=focal, fy=focal, cx=width / 2, cy=height / 2, width=width,
                       height=height, world_to_camera=np.eye(4) if w2c is None else w2c)


def random_gaussians(rng, n, depth=5.0, spread=1.0, scale=(0.2, 0.6), sh_coeffs=1):
    pos = rng.uniform(-spread, spread, (n, 3))
    pos[:, 2] += depth
    log_scales = np.log(rng.uniform(*scale, (n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    logits = rng.normal(size=n)
    sh = rng.normal(size=(n, sh_coeffs, 3)) * 0.4
    return pos, log_scales, q, logits, sh


def random_scene(rng, n, sh_degree=0, **kw) -> GaussianSet:
    pos, ls, q, ol, sh = random_gaussians(rng, n, sh_coeffs=(sh_degree + 1) ** 2, **kw)
    return GaussianSet(pos, ls, q, ol, sh, sh_degree=sh_degree, active_sh_degree=sh_degree)


def tiny_spec(**kw) -> SyntheticSceneSpec:
    doc = {
        "width": 16, "height": 12, "n_frames": 4, "frame_interval": 0.5,
        "static_boxes": [{"center": [2.0, 2.0, 0.5], "size": [1, 1, 1], "color": [0.2, 0.3, 0.8]}],
        "dynamic_bodies": [{"kind": "sphere", "size": 0.6, "color": [0.9, 0.1, 0.1],
                            "start": [-0.5, 0.0, 1.0], "velocity": [0.5, 0.0, 0.0]}],
        "camera": {"eye_start": [0, -6, 1], "eye_end": [0, -6, 1],
                   "target_start": [0, 0, 1], "target_end": [0, 0, 1], "fx": 12.0, "fy": 12.0},
        "prior_spacing": 0.3, "depth_fraction": 0.2, "noise_std": 0.0,
    }
    doc.update(kw)
    return SyntheticSceneSpec.from_dict(doc)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 6-frame 24x16 synthetic clip on disk."""
    root = tmp_path_factory.mktemp("tiny")
    synthesize(tiny_spec(width=24, height=16, n_frames=6, prior_spacing=0.4), root, seed=0)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture
def oblique_camera():
    return make_camera(32, 24, 30.0, look_at([1.0, -2.0, 1.0], [0.0, 0.0, 5.0], up=(0, -1, 0)))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[key])
