import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchbodynet import gradcore as gc
from sketchbodynet.camera import CameraParams, from_pixels, project, project_np, to_pixels, transform_camera

from conftest import leaf

coords = st.floats(-5, 5, allow_nan=False)


def test_identity_camera():
    assert np.array_equal(project_np([[0.5, -0.2, 7.0]], CameraParams(1, 0, 0)), [[0.5, -0.2]])


def test_hand_computed_camera():
    assert np.allclose(project_np([[0.2, 0.3, -1.0]], [2.0, 0.1, 0.0]), [[0.6, 0.6]], atol=1e-15)


def test_doubling_scale_doubles_output(rng):
    P = rng.normal(size=(10, 3))
    assert np.array_equal(project_np(P, [2.4, 0, 0]), 2 * project_np(P, [1.2, 0, 0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=coords), st.floats(-3, 3), st.floats(-3, 3),
       arrays(np.float64, 3, elements=st.floats(0.1, 3)))
def test_project_is_affine_in_points(P, a, b, cam):
    cam = cam.copy()
    cam[1:] -= 1.5
    lhs = project_np(a * P[0] + b * P[1], cam)
    origin = project_np(np.zeros(3), cam)
    rhs = a * (project_np(P[0], cam) - origin) + b * (project_np(P[1], cam) - origin) + origin
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * (1 + np.abs(lhs).max())


@pytest.mark.parametrize("R", [2, 7, 64, 224])
def test_pixel_corners_and_centre(R):
    assert np.array_equal(to_pixels([-1.0, 1.0], R), [0.0, 0.0])
    assert np.array_equal(to_pixels([0.0, 0.0], R), [(R - 1) / 2, (R - 1) / 2])
    assert np.array_equal(to_pixels([1.0, -1.0], R), [R - 1.0, R - 1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-2, 2)), st.integers(2, 512))
def test_pixel_roundtrip(uv, R):
    assert np.max(np.abs(from_pixels(to_pixels(uv, R), R) - uv)) < 1e-9


def test_project_gradients(rng):
    P, cam = leaf(rng.normal(size=(5, 3))), leaf([1.3, 0.2, -0.1])
    w = rng.normal(size=(5, 2))
    assert gc.finite_diff_check(lambda p: gc.tsum(project(p[0], p[1]) * w), [P, cam]) < 1e-6


def test_batched_cameras(rng):
    P = rng.normal(size=(3, 4, 3))
    cams = np.array([[1.0, 0, 0], [2.0, 0.1, 0.2], [0.5, -0.3, 0.0]])
    out = project(leaf(P), leaf(cams)).data
    for i in range(3):
        assert np.array_equal(out[i], project_np(P[i], cams[i]))
    Pt, ct = leaf(P), leaf(cams)
    assert gc.finite_diff_check(lambda p: gc.tsum(gc.square(project(p[0], p[1]))), [Pt, ct]) < 1e-6


def test_transform_camera_composes_with_similarity(rng):
    P = rng.normal(size=(6, 3))
    cam = CameraParams(0.9, 0.05, -0.02)
    new = transform_camera(cam, 1.7, (0.3, -0.4))
    assert np.allclose(project_np(P, new), 1.7 * project_np(P, cam) + [0.3, -0.4], atol=1e-14)
