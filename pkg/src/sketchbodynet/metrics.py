"""Evaluation metrics: MPJPE, Procrustes-aligned error, silhouette Acc./F1."""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bodymodel import smpl_forward_np
from .sketchgen import ink_mask, rasterize_silhouette

METERS_TO_MM = 1000.0
TABLE_COLUMNS = ("MPJPE", "Reconst. Error", "Acc.", "F1")


class ProcrustesError(ValueError):
    """Degenerate point sets (zero variance)."""


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def _masked(pred, gt, mask):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask is None:
        return pred, gt
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("joint mask selects no joints")
    return pred[mask], gt[mask]


def mpjpe(pred, gt, root_index=0, mask=None, align_root=True):
    """Mean per-joint Euclidean error after subtracting each set's root joint."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if align_root:
        pred = pred - pred[root_index]
        gt = gt - gt[root_index]
    p, g = _masked(pred, gt, mask)
    if len(p) == 0:
        raise ValueError("no joints to evaluate")
    return float(np.linalg.norm(p - g, axis=-1).mean())


def procrustes_align(pred, gt):
    """Similarity transform minimising sum |s R pred_i + t - gt_i|^2 (closed form)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"need matching (K, 3) point sets, got {pred.shape} and {gt.shape}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    X, Y = pred - mu_p, gt - mu_g
    var_p = (X * X).sum()
    if var_p <= 1e-300 or (Y * Y).sum() <= 1e-300:
        raise ProcrustesError("point set has zero variance")
    U, S, Vt = np.linalg.svd(X.T @ Y)
    D = np.ones(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2] = -1.0
    R = Vt.T @ np.diag(D) @ U.T
    s = float((S * D).sum() / var_p)
    return SimilarityTransform(s, R, mu_g - s * R @ mu_p)


def reconst_error(pred, gt, mask=None):
    """Mean per-joint distance after optimal similarity alignment."""
    p, g = _masked(pred, gt, mask)
    aligned = procrustes_align(p, g).apply(p)
    return float(np.linalg.norm(aligned - g, axis=-1).mean())


def fill_sketch(sketch, closing_radius=2):
    """Silhouette from a drawn outline: strokes plus everything they enclose.

    Returns ``(mask, used_closing)``. If the strokes enclose nothing, they are
    closed morphologically (square element of ``closing_radius``) first.
    """
    ink = ink_mask(sketch)
    filled = ndimage.binary_fill_holes(ink)
    if ink.any() and filled.sum() == ink.sum() and closing_radius > 0:
        size = 2 * closing_radius + 1
        closed = ndimage.binary_closing(ink, structure=np.ones((size, size), bool), border_value=0)
        return ndimage.binary_fill_holes(closed | ink), True
    return filled, False


def outer_silhouette(mask):
    """Mask with enclosed background (e.g. between crossed legs) filled in.

    An outline drawing cannot mark such holes, so filled sketches never have
    them; predictions are compared in the same form.
    """
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


def _check_masks(pred_mask, gt_mask):
    p, g = np.asarray(pred_mask).astype(bool), np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask resolutions differ: {p.shape} vs {g.shape}")
    return p, g


def silhouette_accuracy(pred_mask, gt_mask):
    """Percentage of pixels where the two masks agree."""
    p, g = _check_masks(pred_mask, gt_mask)
    return float((p == g).mean() * 100.0)


def silhouette_f1(pred_mask, gt_mask):
    p, g = _check_masks(pred_mask, gt_mask)
    np_, ng = p.sum(), g.sum()
    if np_ == 0 and ng == 0:
        return 100.0
    if np_ == 0 or ng == 0:
        return 0.0
    inter = (p & g).sum()
    if inter == 0:
        return 0.0
    precision, recall = inter / np_, inter / ng
    return float(2 * precision * recall / (precision + recall) * 100.0)


def silhouette_iou(pred_mask, gt_mask):
    p, g = _check_masks(pred_mask, gt_mask)
    union = (p | g).sum()
    return 100.0 if union == 0 else float((p & g).sum() / union * 100.0)


@dataclass
class MetricsReport:
    per_sample: list
    means: dict
    counts: dict
    excluded: dict
    closing_fallbacks: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "means": self.means,
            "counts": self.counts,
            "excluded": self.excluded,
            "closing_fallbacks": self.closing_fallbacks,
            "per_sample": self.per_sample,
            "units": {"mpjpe": "mm", "reconst_error": "mm", "acc": "%", "f1": "%", "iou": "%"},
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, label="SketchBodyNet"):
        keys = ("mpjpe", "reconst_error", "acc", "f1")
        cells = ["-" if self.means.get(k) is None else f"{self.means[k]:.2f}" for k in keys]
        widths = [max(len(h), len(c)) for h, c in zip(TABLE_COLUMNS, cells)]
        name_w = max(len("Method"), len(label))
        head = "  ".join([f"{'Method':<{name_w}}"] + [f"{h:>{w}}" for h, w in zip(TABLE_COLUMNS, widths)])
        row = "  ".join([f"{label:<{name_w}}"] + [f"{c:>{w}}" for c, w in zip(cells, widths)])
        lines = [head, "-" * len(head), row]
        if any(self.excluded.values()):
            lines.append("")
            lines.append("samples per metric: " + ", ".join(f"{k}={self.counts[k]}" for k in keys)
                         + " (excluded: " + ", ".join(f"{k}={self.excluded[k]}" for k in keys) + ")")
        return "\n".join(lines) + "\n"


class OracleModel:
    """Emits each sample's own ground-truth parameters."""

    def __call__(self, sample):
        return sample.theta, sample.beta, sample.cam


def evaluate_dataset(model, samples, spec, root_index=0, closing_radius=2):
    """Run ``model(sample) -> (theta, beta, cam)`` over samples and average metrics.

    Samples without ground-truth 3-D joints are excluded from MPJPE and
    Reconst. Error; predictions without a camera are excluded from Acc./F1.
    Silhouettes are compared as filled outer contours (see ``outer_silhouette``).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    keys = ("mpjpe", "reconst_error", "acc", "f1", "iou")
    rows, fallbacks = [], 0
    for i, sample in enumerate(samples):
        theta, beta, cam = model(sample)
        beta = np.zeros(spec.n_beta) if beta is None else beta
        row = {"index": i, "id": sample.meta.get("id", str(i)), "source": sample.source}
        verts, joints = smpl_forward_np(spec, theta, beta)
        if sample.joints3d is not None:
            mask = sample.mask_or_all(spec.K)
            row["mpjpe"] = mpjpe(joints, sample.joints3d, root_index, mask) * METERS_TO_MM
            row["reconst_error"] = reconst_error(joints, sample.joints3d, mask) * METERS_TO_MM
        if cam is not None:
            gt_mask, closed = fill_sketch(sample.image, closing_radius)
            fallbacks += int(closed)
            if np.asarray(cam, dtype=np.float64).reshape(3)[0] > 0:
                pred_mask = outer_silhouette(rasterize_silhouette(verts, spec.faces, cam, sample.image.shape[0]))
            else:  # a non-positive scale renders nothing
                pred_mask = np.zeros(sample.image.shape, dtype=bool)
                row["degenerate_camera"] = True
            row["acc"] = silhouette_accuracy(pred_mask, gt_mask)
            row["f1"] = silhouette_f1(pred_mask, gt_mask)
            row["iou"] = silhouette_iou(pred_mask, gt_mask)
            row["closing_fallback"] = closed
        rows.append(row)
    means, counts, excluded = {}, {}, {}
    for k in keys:
        vals = [r[k] for r in rows if k in r]
        counts[k] = len(vals)
        excluded[k] = len(rows) - len(vals)
        means[k] = float(np.mean(vals)) if vals else None
    return MetricsReport(rows, means, counts, excluded, fallbacks)
