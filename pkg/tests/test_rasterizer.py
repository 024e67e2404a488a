import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_camera, random_gaussians
from dynsplat.camera import look_at
from oracles import naive_render, sweep_render
from dynsplat.errors import InvalidParameterError, RenderDiagnosticsError
from dynsplat.gaussians import eval_sh
from dynsplat.rasterizer import (
    num_tiles, project, render, render_backward, to_uint8, view_directions,
)


def _render(args, camera, **kw):
    out, _ = render(*args, camera, **kw)
    return out


def test_empty_scene_renders_black():
    cam = make_camera()
    out, rec = render(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                      np.zeros((0, 1, 3)), cam)
    assert rec is None
    assert out.rgb.shape == (16, 16, 3) and not out.rgb.any() and not out.alpha.any()
    with pytest.raises(InvalidParameterError):
        render_backward(rec, np.zeros((16, 16, 3)))


def test_single_saturated_gaussian_at_pixel_center():
    cam = make_camera()
    cam.cx = cam.cy = 8.5  # pixel (8, 8) center
    sh = np.array([[[0.3, -0.2, 0.1]]])
    out = _render((np.array([[0.0, 0.0, 4.0]]), np.log(np.full((1, 3), 0.2)),
                   np.array([[1.0, 0, 0, 0]]), np.array([12.0]), sh), cam)
    c = eval_sh(sh[0], [0, 0, 1], 0)
    np.testing.assert_allclose(out.rgb[8, 8], 0.99 * c, rtol=1e-12)
    assert out.alpha[8, 8] == pytest.approx(0.99, rel=1e-12)
    assert out.depth[8, 8] == pytest.approx(0.99 * 4.0, rel=1e-12)


def test_gaussian_behind_camera_is_culled():
    cam = make_camera()
    assert project([0, 0, -3.0], np.eye(3) * 0.1, cam) is None
    p = project([0, 0, 3.0], np.eye(3) * 0.1, cam)
    np.testing.assert_allclose(p.mean2d, [8, 8])
    np.testing.assert_allclose(p.cov2d, np.eye(2) * (0.1 * (20 / 3) ** 2 + 0.3))


def test_nonfinite_input_reports_gaussian_index():
    rng = np.random.default_rng(0)
    args = list(random_gaussians(rng, 6))
    args[0][4, 1] = np.nan
    with pytest.raises(RenderDiagnosticsError) as err:
        render(*args, make_camera())
    assert err.value.index == 4


def test_matches_per_pixel_oracle_including_semantics():
    rng = np.random.default_rng(7)
    cam = make_camera(12, 10, 15.0)
    args = random_gaussians(rng, 12, sh_coeffs=4)
    sem = rng.normal(size=(12, 3))
    out, _ = render(*args, cam, sh_degree=1, semantic=sem)
    rgb, depth, alpha, sem_img, _ = naive_render(*args, cam, degree=1, semantic=sem)
    np.testing.assert_allclose(out.rgb, rgb, atol=1e-12)
    np.testing.assert_allclose(out.depth, depth, atol=1e-12)
    np.testing.assert_allclose(out.alpha, alpha, atol=1e-12)
    np.testing.assert_allclose(out.semantic, sem_img, atol=1e-12)


def test_sweep_oracle_agrees_with_per_pixel_oracle():
    rng = np.random.default_rng(8)
    cam = make_camera(10, 9, 12.0)
    args = random_gaussians(rng, 15, sh_coeffs=4)
    a = naive_render(*args, cam, degree=1)
    b = sweep_render(*args, cam, degree=1)
    for x, y in zip(a[:3], b):
        np.testing.assert_allclose(x, y, atol=1e-13)


def test_early_termination_stops_compositing():
    cam = make_camera()
    cam.cx = cam.cy = 8.5
    n = 5
    pos = np.column_stack([np.zeros(n), np.zeros(n), 3.0 + np.arange(n)])
    args = (pos, np.log(np.full((n, 3), 0.3)), np.tile([1.0, 0, 0, 0], (n, 1)),
            np.full(n, 12.0), np.zeros((n, 1, 3)))
    out = _render(args, cam)
    # 0.99 then 0.0099: the third would drop T to 1e-6 < 1e-4 and is not blended
    assert out.alpha[8, 8] == pytest.approx(1 - 0.01 * 0.01, rel=1e-12)
    assert out.depth[8, 8] == pytest.approx(0.99 * 3 + 0.0099 * 4, rel=1e-12)


@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 8, 16, 32]))
def test_tile_size_does_not_change_the_image(seed, tile):
    rng = np.random.default_rng(seed)
    cam = make_camera(40, 24, 25.0)
    args = random_gaussians(rng, 30, spread=1.5, sh_coeffs=4)
    ref = _render(args, cam, sh_degree=1)
    out = _render(args, cam, sh_degree=1, tile=tile)
    np.testing.assert_array_equal(out.rgb, ref.rgb)
    np.testing.assert_array_equal(out.alpha, ref.alpha)


@given(st.integers(0, 2**31 - 1))
def test_weights_nonnegative_and_sum_to_alpha(seed):
    rng = np.random.default_rng(seed)
    n = 20
    cam = make_camera(24, 20, 18.0)
    args = random_gaussians(rng, n, spread=1.2)
    # one-hot semantic channels expose each Gaussian's compositing weight
    out = _render(args, cam, semantic=np.eye(n))
    weights = out.semantic
    assert weights.min() >= 0.0
    np.testing.assert_allclose(weights.sum(axis=2), out.alpha, atol=1e-12)
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))


def test_viewspace_norm_is_ndc_scaled_mean2d_gradient():
    rng = np.random.default_rng(2)
    cam = make_camera(20, 12, 15.0)
    args = random_gaussians(rng, 6)
    out, rec = render(*args, cam)
    g = render_backward(rec, np.ones((12, 20, 3)))
    expect = np.hypot(g.mean2d[:, 0] * 10, g.mean2d[:, 1] * 6)
    np.testing.assert_allclose(g.viewspace_norm, expect)
    assert np.all(g.positions[~g.visible] == 0)


def test_backward_rejects_wrong_gradient_shape():
    rng = np.random.default_rng(2)
    cam = make_camera()
    _, rec = render(*random_gaussians(rng, 3), cam)
    with pytest.raises(InvalidParameterError):
        render_backward(rec, np.ones((3, 3, 3)))


def test_helpers():
    assert num_tiles(make_camera(33, 16), 16) == 3
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.5, 2.0])), [0, 128, 255])


@pytest.mark.parametrize("through_dirs", [False, True])
def test_position_gradient_with_frozen_or_free_view_directions(through_dirs):
    rng = np.random.default_rng(8)
    cam = make_camera(16, 16, 18.0, look_at([0.4, -0.3, -0.5], [0.0, 0.0, 5.0], up=(0, -1, 0)))
    pos, ls, q, ol, sh = random_gaussians(rng, 4, spread=0.7, sh_coeffs=16)
    w = rng.normal(size=(16, 16, 3))
    frozen = view_directions(pos, cam)

    def loss(p):
        dirs = None if through_dirs else frozen
        return float((render(p, ls, q, ol, sh, cam, sh_degree=3, view_dirs=dirs)[0].rgb * w).sum())

    _, rec = render(pos, ls, q, ol, sh, cam, sh_degree=3, view_dir_grad=through_dirs)
    g = render_backward(rec, w).positions
    num = np.zeros_like(pos)
    for idx in np.ndindex(pos.shape):
        step = np.zeros_like(pos)
        step[idx] = 1e-6
        num[idx] = (loss(pos + step) - loss(pos - step)) / 2e-6
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-7 * np.abs(num).max())
