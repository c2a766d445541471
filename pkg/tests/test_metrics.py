import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from sketchbodynet.bodymodel import BodyParams, smpl_forward_np
from sketchbodynet.camera import CameraParams
from sketchbodynet.metrics import (
    TABLE_COLUMNS,
    OracleModel,
    ProcrustesError,
    evaluate_dataset,
    fill_sketch,
    mpjpe,
    outer_silhouette,
    procrustes_align,
    reconst_error,
    silhouette_accuracy,
    silhouette_f1,
    silhouette_iou,
)
from sketchbodynet.sketchgen import (
    PAPER,
    SketchSample,
    extract_edges,
    generate_synthetic_sample,
    rasterize_silhouette,
)

points = arrays(np.float64, (6, 3), elements=st.floats(-2, 2))


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()


def test_mpjpe_examples(rng):
    gt = rng.normal(size=(5, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(np.array([[0.0, 0, 0], [3.0, 4.0, 0]]), np.zeros((2, 3))) == 2.5
    assert mpjpe(gt + [1.0, -2.0, 0.5], gt) == pytest.approx(0.0, abs=1e-15)
    assert mpjpe(gt + [1.0, 0, 0], gt, align_root=False) == pytest.approx(1.0)


def test_mpjpe_mask(rng):
    pred, gt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    mask = np.array([True, True, False, True])
    full = np.linalg.norm((pred - pred[0]) - (gt - gt[0]), axis=1)
    assert mpjpe(pred, gt, mask=mask) == pytest.approx(full[mask].mean())


def test_procrustes_identity(rng):
    X = rng.normal(size=(10, 3))
    T = procrustes_align(X, X)
    assert abs(T.scale - 1) < 1e-10 and np.allclose(T.rotation, np.eye(3), atol=1e-10)
    assert np.allclose(T.translation, 0, atol=1e-10)


def test_procrustes_recovers_planted_transform(rng):
    X = rng.normal(size=(16, 3))
    R0, t0 = random_rotation(rng), rng.normal(size=3)
    T = procrustes_align(X, 2.0 * X @ R0.T + t0)
    assert abs(T.scale - 2.0) < 1e-8
    assert np.max(np.abs(T.rotation - R0)) < 1e-8 and np.max(np.abs(T.translation - t0)) < 1e-8


def test_procrustes_handles_reflection(rng):
    X = rng.normal(size=(8, 3))
    T = procrustes_align(X, X * [1, 1, -1])
    assert np.linalg.det(T.rotation) == pytest.approx(1.0)


def test_procrustes_degenerate():
    with pytest.raises(ProcrustesError):
        procrustes_align(np.ones((4, 3)), np.random.default_rng(0).normal(size=(4, 3)))


def test_procrustes_beats_random_candidates(rng):
    X = rng.normal(size=(12, 3))
    Y = 1.3 * X @ random_rotation(rng).T + rng.normal(size=3) + 0.1 * rng.normal(size=X.shape)
    best = ((procrustes_align(X, Y).apply(X) - Y) ** 2).sum()
    for _ in range(1000):
        R, s, t = random_rotation(rng), rng.uniform(0.5, 2.0), rng.normal(size=3)
        assert best <= ((s * X @ R.T + t - Y) ** 2).sum()


def test_reconst_error_examples(rng):
    X = rng.normal(size=(10, 3))
    R = random_rotation(rng)
    assert reconst_error(X, 0.7 * X @ R.T + [1, 2, 3]) < 1e-8
    Rz = np.array([[0, -1.0, 0], [1.0, 0, 0], [0, 0, 1.0]])
    assert reconst_error(X @ Rz.T, X) < 1e-10 and mpjpe(X @ Rz.T, X) > 0
    for _ in range(100):
        a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        assert reconst_error(a, b) <= mpjpe(a, b) + 1e-9


@settings(max_examples=60, deadline=None)
@given(points, points, st.integers(0, 1000))
def test_metric_invariances(pred, gt, seed):
    if (pred - pred.mean(0)).std() < 1e-3 or (gt - gt.mean(0)).std() < 1e-3:
        return
    rng = np.random.default_rng(seed)
    R, t = random_rotation(rng), rng.normal(size=3)
    # The alignment minimises squared error, so that is what it can never increase.
    p0, g0 = pred - pred[0], gt - gt[0]
    aligned = procrustes_align(pred, gt).apply(pred)
    assert ((aligned - gt) ** 2).sum() <= ((p0 - g0) ** 2).sum() + 1e-9
    moved = 1.7 * pred @ R.T + t
    assert abs(reconst_error(moved, gt) - reconst_error(pred, gt)) < 1e-8
    assert abs(mpjpe(pred @ R.T + t, gt @ R.T + t) - mpjpe(pred, gt)) < 1e-9


def test_reconst_error_below_mpjpe_on_random_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        pred, gt = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
        assert reconst_error(pred, gt) <= mpjpe(pred, gt) + 1e-9


def test_mean_distance_can_exceed_mpjpe_after_alignment():
    # Least squares does not minimise mean distance, so the mean can grow.
    pred = np.zeros((6, 3))
    pred[2] = (0.5, 0, 0)
    gt = np.ones((6, 3))
    gt[1] = (0, 1, 1)
    assert reconst_error(pred, gt) > mpjpe(pred, gt)


def _square_mask(r0, c0, n=64, size=16):
    m = np.zeros((n, n), bool)
    m[r0 : r0 + size, c0 : c0 + size] = True
    return m


def test_accuracy_examples():
    a = np.zeros((8, 8), bool)
    a[2:5, 1:6] = True
    assert silhouette_accuracy(a, a) == 100.0
    assert silhouette_accuracy(a, ~a) == 0.0
    overlap = _square_mask(0, 0)
    pred = overlap | _square_mask(20, 20)
    gt = overlap | _square_mask(40, 40)
    assert silhouette_accuracy(pred, gt) == 87.5


def test_f1_examples():
    a = _square_mask(0, 0, size=10)
    assert silhouette_f1(a, a) == 100.0
    assert silhouette_f1(a, _square_mask(30, 30, size=10)) == 0.0
    pred = np.zeros((20, 20), bool)
    gt = np.zeros((20, 20), bool)
    pred.ravel()[:100] = True
    gt.ravel()[50:150] = True
    assert silhouette_f1(pred, gt) == 50.0
    empty = np.zeros((4, 4), bool)
    assert silhouette_f1(empty, empty) == 100.0 and silhouette_f1(empty, a[:4, :4]) == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (6, 7)), arrays(bool, (6, 7)))
def test_silhouette_metric_symmetry(p, g):
    assert silhouette_accuracy(p, g) == silhouette_accuracy(g, p)
    assert silhouette_f1(p, g) == silhouette_f1(g, p)
    assert silhouette_iou(p, g) == silhouette_iou(g, p)


def test_mask_resolution_mismatch():
    with pytest.raises(ValueError):
        silhouette_accuracy(np.zeros((4, 4)), np.zeros((5, 5)))


def test_fill_closed_outline():
    sq = _square_mask(10, 10, n=32, size=10)
    filled, closed = fill_sketch(extract_edges(sq))
    assert np.array_equal(filled, sq) and not closed


def test_fill_open_outline_uses_closing():
    sq = _square_mask(10, 10, n=32, size=10)
    sketch = extract_edges(sq)
    sketch[10, 14:16] = PAPER  # open a 2-px gap in the top edge
    filled, closed = fill_sketch(sketch, closing_radius=2)
    assert closed
    assert silhouette_f1(filled, sq) > 95.0


def _oracle_samples(spec, n=3):
    rng = np.random.default_rng(11)
    out = []
    for i in range(n):
        theta = rng.uniform(-0.3, 0.3, spec.n_theta)
        s = generate_synthetic_sample(spec, BodyParams(theta, rng.normal(size=spec.n_beta) * 0.5),
                                      CameraParams(0.9, 0.0, 0.0), 64, view_angle=0.5 * i)
        s.meta["id"] = f"s{i}"
        out.append(s)
    return out


def test_enclosed_background_is_filled_on_both_sides():
    ring = _square_mask(10, 10, n=32, size=12)
    ring[14:18, 14:18] = False
    filled, _ = fill_sketch(extract_edges(ring))
    assert filled.sum() == ring.sum() + 16
    assert np.array_equal(outer_silhouette(ring), filled)


def test_outline_fill_recovers_outer_silhouette(mini_spec):
    # Includes poses whose legs or arms close a loop around background.
    for s in _oracle_samples(mini_spec, 6):
        verts, _ = smpl_forward_np(mini_spec, s.theta, s.beta)
        mask = rasterize_silhouette(verts, mini_spec.faces, s.cam, 64)
        filled, closed = fill_sketch(s.image)
        assert not closed and np.array_equal(filled, outer_silhouette(mask))


def test_oracle_evaluation(mini_spec):
    report = evaluate_dataset(OracleModel(), _oracle_samples(mini_spec), mini_spec)
    assert report.means["mpjpe"] == 0.0
    assert report.means["reconst_error"] < 1e-6
    assert report.means["acc"] >= 99.0 and report.means["f1"] >= 99.0
    for k in ("mpjpe", "acc", "f1"):
        assert report.means[k] == pytest.approx(np.mean([r[k] for r in report.per_sample]))


def test_empty_dataset_raises(mini_spec):
    with pytest.raises(ValueError):
        evaluate_dataset(OracleModel(), [], mini_spec)


def test_exclusions_and_table(mini_spec):
    samples = _oracle_samples(mini_spec, 2)
    samples.append(SketchSample(image=samples[0].image, source="freehand", theta=samples[0].theta,
                                joints3d=None, meta={"id": "nolabels"}))
    model = lambda s: (s.theta, s.beta, s.cam if s.source == "synthetic" else None)
    report = evaluate_dataset(model, samples, mini_spec)
    assert report.counts["mpjpe"] == 2 and report.excluded["mpjpe"] == 1 and report.excluded["acc"] == 1
    table = report.to_table("Oracle")
    header = table.splitlines()[0].split()
    assert " ".join(header[1:]) == " ".join(TABLE_COLUMNS)
    assert "samples per metric" in table
    assert json.loads(report.to_json())["counts"]["mpjpe"] == 2


def test_negative_scale_prediction_scores_empty(mini_spec):
    s = _oracle_samples(mini_spec, 1)
    report = evaluate_dataset(lambda x: (x.theta, x.beta, np.array([-1.0, 0, 0])), s, mini_spec)
    assert report.means["f1"] == 0.0 and report.per_sample[0]["degenerate_camera"]
