import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_difference, homogeneous_projection, relative_error
from handrecon.camera import (
    CameraIntrinsics,
    CameraState,
    CropBox,
    crop_to_full_image,
    full_image_to_crop,
    project,
    project_with_gradients,
    weak_perspective_to_translation,
)
from handrecon.errors import BehindCameraError, InvalidCameraError, InvalidInputError, ShapeError

K = CameraIntrinsics(1000.0, 1000.0, 320.0, 240.0, 640, 480)


def test_point_on_axis_hits_principal_point():
    cam = CameraState([0, 0, 0], K)
    np.testing.assert_array_equal(project([[0.0, 0.0, 2.0]], cam).numpy(), [[320.0, 240.0]])


def test_known_projection():
    cam = CameraState([0.1, 0, 0], K)
    np.testing.assert_allclose(project([[0.0, 0.0, 1.0]], cam).numpy(), [[420.0, 240.0]], atol=1e-12)


def test_matches_homogeneous_matrix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = rng.normal(scale=0.1, size=(21, 3))
        t = np.array([*rng.normal(scale=0.05, size=2), rng.uniform(0.4, 2.0)])
        k = CameraIntrinsics(*rng.uniform(300, 900, 2), *rng.uniform(50, 300, 2), 640, 480)
        got = project(pts, CameraState(t, k)).numpy()
        expect = homogeneous_projection(pts, t, k.fx, k.fy, k.cx, k.cy)
        assert np.abs(got - expect).max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(depth=st.floats(0.2, 5.0), x=st.floats(-1, 1), y=st.floats(-1, 1), lam=st.floats(0.1, 10))
def test_depth_scaling_invariance(depth, x, y, lam):
    # scaling a camera-frame point along its ray leaves its pixel unchanged
    cam = CameraState([0, 0, 0], K)
    p = np.array([[x, y, depth]])
    assert np.abs(project(p, cam).numpy() - project(lam * p, cam).numpy()).max() < 1e-9


def test_behind_camera_raises_with_indices():
    cam = CameraState([0, 0, 0.5], K)
    pts = np.array([[0, 0, 0.1], [0, 0, -0.6], [0, 0, 1.0], [0, 0, -0.5]])
    with pytest.raises(BehindCameraError) as info:
        project(pts, cam)
    assert info.value.indices == [1, 3]


def test_invalid_intrinsics_and_shapes():
    with pytest.raises(InvalidCameraError):
        CameraIntrinsics(0.0, 1.0, 0, 0, 10, 10)
    with pytest.raises(InvalidCameraError):
        CameraIntrinsics(1.0, 1.0, 0, 0, 0, 10)
    with pytest.raises(ShapeError):
        CameraState([0, 0], K)
    with pytest.raises(InvalidInputError):
        CameraState([0, np.nan, 1], K)
    with pytest.raises(ShapeError):
        project(np.zeros((3, 2)), CameraState([0, 0, 1], K))


def test_default_crop_intrinsics():
    k = CameraIntrinsics.for_crop(256)
    assert (k.fx, k.fy, k.cx, k.cy) == (5000.0, 5000.0, 128.0, 128.0)
    assert CameraIntrinsics.for_crop(224).fx == pytest.approx(5000 * 224 / 256)


@pytest.mark.parametrize("seed", range(10))
def test_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(scale=0.1, size=(5, 3))
    t = np.array([0.02, -0.01, 0.8])
    out = project_with_gradients(pts, CameraState(t, K))

    def f_points(flat):
        return project(flat.reshape(5, 3), CameraState(t, K)).numpy()

    def f_t(tt):
        return project(pts, CameraState(tt, K)).numpy()

    fd_pts = central_difference(f_points, pts.ravel(), h=1e-6).reshape(5, 2, 5, 3)
    block = np.stack([fd_pts[i, :, i, :] for i in range(5)])
    assert relative_error(out.d_pixels_d_points.numpy(), block) < 1e-6
    # off-diagonal blocks vanish
    for i in range(5):
        for j in range(5):
            if i != j:
                assert np.abs(fd_pts[i, :, j, :]).max() < 1e-6
    assert relative_error(out.d_pixels_d_translation.numpy(), central_difference(f_t, t, h=1e-6)) < 1e-6


def test_weak_perspective_conversion():
    k = CameraIntrinsics.for_crop(256)
    t = weak_perspective_to_translation(0.8, 0.01, -0.02, 256, k)
    np.testing.assert_allclose(t.numpy(), [0.01, -0.02, 2 * 5000 / (0.8 * 256)])
    with pytest.raises(InvalidCameraError):
        weak_perspective_to_translation(0.0, 0, 0, 256, k)
    with pytest.raises(InvalidCameraError):
        weak_perspective_to_translation(-1.0, 0, 0, 256, k)


def test_weak_perspective_matches_scaled_orthographic():
    # a point at the origin of the hand frame lands at crop center + s * (x + tx) * crop / 2
    k = CameraIntrinsics.for_crop(256)
    s, tx, ty = 0.9, 0.03, -0.01
    t = weak_perspective_to_translation(s, tx, ty, 256, k)
    pts = np.array([[0.02, 0.01, 0.0], [-0.01, 0.03, 0.0]])
    got = project(pts, CameraState(t, k)).numpy()
    expect = 128 + s * (pts[:, :2] + [tx, ty]) * 128
    np.testing.assert_allclose(got, expect, atol=1e-9)


def test_crop_round_trip_and_known_mapping():
    box = CropBox(100.0, 50.0, 200.0, 100.0)
    np.testing.assert_allclose(crop_to_full_image([[0, 0], [256, 256], [128, 128]], box, 256), [[100, 50], [300, 150], [200, 100]])
    pts = np.random.default_rng(1).uniform(0, 256, size=(30, 2))
    back = full_image_to_crop(crop_to_full_image(pts, box, 256), box, 256)
    assert np.abs(back - pts).max() < 1e-12
    with pytest.raises(InvalidInputError):
        CropBox(0, 0, 0, 10)


def test_gradients_flow_through_projection():
    pts = torch.tensor([[0.01, 0.02, 0.0]], dtype=torch.float64, requires_grad=True)
    t = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64, requires_grad=True)
    cam = CameraState(t, K)
    project(pts, cam).sum().backward()
    assert torch.isfinite(pts.grad).all() and torch.isfinite(t.grad).all()
