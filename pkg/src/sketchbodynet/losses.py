"""Training losses and the per-source supervision regimes.

Synthetic sketches are supervised by mesh, 3-D joints, 2-D joints, pose and
shape; freehand sketches only by 3-D joints and pose. The mesh term is a sum
over vertices while the joint and parameter terms are means, as in the
original formulation. Every function accepts a single sample or a leading
batch axis and then returns one value per sample.
"""

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ShapeError

REGIME_TERMS = {
    "synthetic": ("shape3d", "joints3d", "joints2d", "theta", "beta"),
    "freehand": ("joints3d", "theta"),
}
DEFAULT_WEIGHTS = {"shape3d": 1.0, "joints3d": 1.0, "joints2d": 1.0, "theta": 1.0, "beta": 1.0}


class MissingAnnotationError(ValueError):
    """A sample lacks an annotation its loss regime needs."""


def _check_same(pred, gt, what):
    if tuple(pred.shape) != tuple(np.shape(gt)):
        raise ShapeError(f"{what}: prediction {tuple(pred.shape)} vs target {tuple(np.shape(gt))}")


def shape_l1(pred_vertices, gt_vertices, normalize=False):
    """Sum over vertices of the L1 distance; mean instead when ``normalize``."""
    pred = gc.as_tensor(pred_vertices)
    _check_same(pred, gt_vertices, "shape_l1")
    per_vertex = gc.tsum(gc.tabs(pred - gt_vertices), axis=-1)
    return gc.mean(per_vertex, axis=-1) if normalize else gc.tsum(per_vertex, axis=-1)


def joints_mse(pred, gt, mask=None):
    """Squared joint distance, summed over coordinates and averaged over masked joints."""
    pred = gc.as_tensor(pred)
    _check_same(pred, gt, "joints_mse")
    if pred.shape[-1] not in (2, 3):
        raise ShapeError(f"joints must be 2-D or 3-D points, got {pred.shape}")
    mask = np.ones(pred.shape[:-1]) if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=np.float64), pred.shape[:-1]
    )
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("joint mask selects no joints")
    sq = gc.tsum(gc.square(pred - gt), axis=-1)
    return gc.tsum(sq * mask, axis=-1) / counts


def param_mse(pred, gt):
    pred = gc.as_tensor(pred)
    _check_same(pred, gt, "param_mse")
    return gc.mean(gc.square(pred - gt), axis=-1)


@dataclass
class LossBreakdown:
    regime: str
    total: gc.Tensor
    shape3d: gc.Tensor = None
    joints3d: gc.Tensor = None
    joints2d: gc.Tensor = None
    theta: gc.Tensor = None
    beta: gc.Tensor = None

    def values(self):
        """Plain floats (means over the batch); absent terms are None."""
        out = {"regime": self.regime, "total": float(np.mean(self.total.data))}
        for name in DEFAULT_WEIGHTS:
            t = getattr(self, name)
            out[name] = None if t is None else float(np.mean(t.data))
        return out


def regime_losses(regime, pred, target, joint_mask=None, weights=None, normalize=False):
    """Per-sample loss terms for ``regime``.

    ``pred`` maps theta/beta/vertices/joints3d/joints2d to Tensors; ``target``
    maps the same keys to arrays. Only the regime's terms are evaluated.
    """
    if regime not in REGIME_TERMS:
        raise ValueError(f"unknown regime {regime!r}")
    weights = {**DEFAULT_WEIGHTS, **(weights or {})}
    terms = {}
    for name in REGIME_TERMS[regime]:
        key = {"shape3d": "vertices"}.get(name, name)
        if target.get(key) is None:
            raise MissingAnnotationError(f"{regime} regime needs {key!r}")
        if name == "shape3d":
            terms[name] = shape_l1(pred["vertices"], target["vertices"], normalize)
        elif name in ("joints3d", "joints2d"):
            terms[name] = joints_mse(pred[name], target[name], joint_mask)
        else:
            terms[name] = param_mse(pred[name], target[name])
    total = None
    for name, value in terms.items():
        w = weights[name]
        part = value if w == 1.0 else gc.scale(value, w)
        total = part if total is None else total + part
    return LossBreakdown(regime=regime, total=total, **terms)


def total_loss(sample, net_out, smpl_out, projected2d, weights=None, normalize=False):
    """Loss for one :class:`SketchSample` under its source's regime."""
    missing = sample.missing_annotations()
    if missing:
        raise MissingAnnotationError(f"{sample.source} sample lacks {missing}")
    pred = {
        "theta": net_out.theta,
        "beta": net_out.beta,
        "vertices": smpl_out.vertices,
        "joints3d": smpl_out.joints3d,
        "joints2d": projected2d,
    }
    target = {
        "theta": sample.theta,
        "beta": sample.beta,
        "vertices": sample.mesh_vertices,
        "joints3d": sample.joints3d,
        "joints2d": sample.joints2d,
    }
    mask = None if sample.joint_mask is None else np.asarray(sample.joint_mask, dtype=np.float64)
    return regime_losses(sample.source, pred, target, mask, weights, normalize)
