import numpy as np
import pytest

from sketchbodynet import gradcore as gc
from sketchbodynet.bodymodel import BodyParams, smpl_forward
from sketchbodynet.camera import project
from sketchbodynet.losses import (
    MissingAnnotationError,
    joints_mse,
    param_mse,
    regime_losses,
    shape_l1,
    total_loss,
)
from sketchbodynet.network import NetOutput
from sketchbodynet.sketchgen import SketchSample

from conftest import leaf


def test_shape_l1_examples(rng):
    gt = rng.normal(size=(20, 3))
    assert shape_l1(leaf(gt), gt).item() == 0.0
    pred = gt.copy()
    pred[4] += [1.0, -2.0, 3.0]
    assert shape_l1(leaf(pred), gt).item() == pytest.approx(6.0, abs=1e-12)
    off = rng.normal(size=gt.shape)
    assert shape_l1(leaf(gt + 2 * off), gt).item() == pytest.approx(2 * shape_l1(leaf(gt + off), gt).item())
    assert shape_l1(leaf(pred), gt, normalize=True).item() == pytest.approx(6.0 / 20)


def test_joints_mse_examples(rng):
    gt = np.zeros((2, 3))
    assert joints_mse(leaf(gt), gt).item() == 0.0
    assert joints_mse(leaf([[0, 0, 0], [3.0, 4.0, 0]]), gt).item() == 12.5
    assert joints_mse(leaf([[0, 0, 0], [3.0, 4.0, 0]]), gt, mask=[True, False]).item() == 0.0
    with pytest.raises(ValueError):
        joints_mse(leaf(gt), gt, mask=[False, False])


def test_joints_mse_gradient(rng):
    gt = rng.normal(size=(5, 2))
    p = leaf(rng.normal(size=(5, 2)))
    assert gc.finite_diff_check(lambda q: joints_mse(q[0], gt, mask=[1, 1, 0, 1, 1]), [p]) < 1e-7


def test_param_mse_examples(rng):
    assert param_mse(leaf([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
    assert param_mse(leaf([2.0, 3.0]), np.array([1.0, 2.0])).item() == 1.0
    a, b = rng.normal(size=7), rng.normal(size=7)
    perm = rng.permutation(7)
    assert param_mse(leaf(a[perm]), b[perm]).item() == pytest.approx(param_mse(leaf(a), b).item(), abs=1e-15)


def test_shape_mismatch_raises():
    with pytest.raises(gc.ShapeError):
        param_mse(leaf([1.0, 2.0]), np.zeros(3))


def _synthetic_sample(spec, rng):
    theta = rng.uniform(-0.3, 0.3, spec.n_theta)
    beta = rng.normal(size=spec.n_beta)
    cam = np.array([0.9, 0.01, -0.02])
    with gc.no_grad():
        out = smpl_forward(spec, BodyParams(theta, beta))
    return SketchSample(
        image=np.full((8, 8), 255, np.uint8), source="synthetic", theta=theta, beta=beta, cam=cam,
        joints3d=out.joints3d.data, joints2d=project(out.joints3d.data, cam).data,
        mesh_vertices=out.vertices.data,
    )


def _predict(spec, theta, beta, cam):
    net = NetOutput(leaf(theta), leaf(beta), leaf(cam))
    body = smpl_forward(spec, BodyParams(net.theta, net.beta))
    return net, body, project(body.joints3d, net.cam)


def test_perfect_synthetic_prediction_is_zero(mini_spec, rng):
    s = _synthetic_sample(mini_spec, rng)
    br = total_loss(s, *_predict(mini_spec, s.theta, s.beta, s.cam))
    for name in ("shape3d", "joints3d", "joints2d", "theta", "beta"):
        assert getattr(br, name).item() == 0.0
    assert br.total.item() == 0.0


def test_synthetic_total_is_sum_of_components(mini_spec, rng):
    s = _synthetic_sample(mini_spec, rng)
    br = total_loss(s, *_predict(mini_spec, s.theta + 0.1, s.beta - 0.2, s.cam * 1.1))
    parts = [getattr(br, n).item() for n in ("shape3d", "joints3d", "joints2d", "theta", "beta")]
    assert all(p > 0 for p in parts)
    assert abs(br.total.item() - sum(parts)) <= 1e-12 * max(1.0, abs(sum(parts)))


def test_freehand_ignores_beta_and_reports_absent_terms(mini_spec, rng):
    s = _synthetic_sample(mini_spec, rng)
    pred = (s.theta + 0.05, s.beta, s.cam)
    matched = SketchSample(image=s.image, source="freehand", theta=s.theta, joints3d=s.joints3d, beta=s.beta)
    mismatched = SketchSample(image=s.image, source="freehand", theta=s.theta, joints3d=s.joints3d, beta=s.beta + 1)
    a = total_loss(matched, *_predict(mini_spec, *pred))
    b = total_loss(mismatched, *_predict(mini_spec, *pred))
    assert a.total.item() == b.total.item()
    assert a.beta is None and a.joints2d is None and a.shape3d is None
    assert a.values()["beta"] is None
    assert abs(a.total.item() - (a.joints3d.item() + a.theta.item())) <= 1e-12


def test_missing_annotation(mini_spec, rng):
    s = _synthetic_sample(mini_spec, rng)
    s.joints2d = None
    with pytest.raises(MissingAnnotationError):
        total_loss(s, *_predict(mini_spec, s.theta, s.beta, s.cam))
    with pytest.raises(MissingAnnotationError):
        regime_losses("freehand", {"joints3d": leaf(np.zeros((16, 3)))}, {"theta": None, "joints3d": np.zeros((16, 3))})
    with pytest.raises(ValueError):
        regime_losses("weak", {}, {})


def test_batched_terms_are_per_sample(rng):
    gt = rng.normal(size=(3, 10, 3))
    pred = rng.normal(size=(3, 10, 3))
    batch = shape_l1(leaf(pred), gt).data
    assert batch.shape == (3,)
    assert np.allclose(batch, [shape_l1(leaf(pred[i]), gt[i]).item() for i in range(3)])


def test_weights_scale_terms(rng):
    pred = {"theta": leaf(rng.normal(size=4)), "joints3d": leaf(rng.normal(size=(3, 3)))}
    target = {"theta": np.zeros(4), "joints3d": np.zeros((3, 3))}
    a = regime_losses("freehand", pred, target)
    b = regime_losses("freehand", pred, target, weights={"theta": 2.0})
    assert b.total.item() == pytest.approx(a.total.item() + a.theta.item())
