"""Synthetic sketches: silhouette rasterization, edge strokes, cropping, PGM I/O.

Images are square 2-D ``uint8`` arrays. Sketches are black strokes (0) on a
white background (255); masks use 1 for foreground and 0 for background.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels
from .bodymodel import smpl_forward_np
from .camera import CameraParams, from_pixels, project_np, to_pixels, transform_camera

INK, PAPER = 0, 255


class NoBodyFoundError(ValueError):
    """The sketch has no stroke pixels."""


class OffscreenError(ValueError):
    """The projected body covers no pixels."""


class PGMError(ValueError):
    """Malformed or truncated PGM file."""


@dataclass
class SketchSample:
    image: np.ndarray
    source: str  # "synthetic" or "freehand"
    theta: np.ndarray = None
    beta: np.ndarray = None
    cam: np.ndarray = None
    joints3d: np.ndarray = None
    joints2d: np.ndarray = None
    mesh_vertices: np.ndarray = None
    joint_mask: np.ndarray = None
    meta: dict = field(default_factory=dict)

    REQUIRED = {
        "synthetic": ("theta", "beta", "cam", "joints3d", "joints2d", "mesh_vertices"),
        "freehand": ("theta", "joints3d"),
    }

    def missing_annotations(self):
        if self.source not in self.REQUIRED:
            return [f"source={self.source!r}"]
        return [name for name in self.REQUIRED[self.source] if getattr(self, name) is None]

    def mask_or_all(self, n_joints):
        if self.joint_mask is None:
            return np.ones(n_joints, dtype=bool)
        return np.asarray(self.joint_mask, dtype=bool)


def rasterize_silhouette(vertices, faces, cam, resolution):
    """Union of triangle coverage at pixel centres (inclusive edges, no depth test)."""
    cam = cam if isinstance(cam, CameraParams) else CameraParams.from_vector(cam)
    if not cam.s > 0:
        raise ValueError(f"camera scale must be positive, got {cam.s}")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if len(vertices) == 0 or len(faces) == 0:
        raise ValueError("cannot rasterize an empty mesh")
    px = to_pixels(project_np(vertices, cam), resolution)
    return kernels.rasterize(px, faces, resolution)


def _shift_or(mask, dr, dc):
    out = np.zeros_like(mask)
    h, w = mask.shape
    out[max(dr, 0) : h + min(dr, 0), max(dc, 0) : w + min(dc, 0)] = mask[
        max(-dr, 0) : h + min(-dr, 0), max(-dc, 0) : w + min(-dc, 0)
    ]
    return out


def erode_cross(mask):
    """Erosion by the 3x3 cross; pixels outside the image count as background."""
    m = np.asarray(mask, dtype=bool)
    out = m.copy()
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        out &= _shift_or(m, dr, dc)
    return out


def dilate_square(mask, radius):
    m = np.asarray(mask, dtype=bool)
    out = m.copy()
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr or dc:
                out |= _shift_or(m, dr, dc)
    return out


def extract_edges(mask, dilation=0):
    """Boundary strokes ``mask & ~erode(mask)`` drawn black on white."""
    m = np.asarray(mask, dtype=bool)
    edges = m & ~erode_cross(m)
    if dilation > 0:
        edges = dilate_square(edges, dilation)
    return np.where(edges, INK, PAPER).astype(np.uint8)


def ink_mask(sketch):
    return np.asarray(sketch) < 128


@dataclass(frozen=True)
class CropTransform:
    """Square crop of an input image resampled to ``out_resolution``.

    ``left``/``top``/``side`` are in pixel-edge coordinates of the input, where
    pixel (r, c) covers [c, c + 1) x [r, r + 1).
    """

    left: float
    top: float
    side: float
    in_resolution: int
    out_resolution: int

    @property
    def zoom(self):
        return self.out_resolution / self.side

    def pixels_to_crop(self, px):
        px = np.asarray(px, dtype=np.float64)
        k = self.zoom
        return np.stack(
            [(px[..., 0] + 0.5 - self.left) * k - 0.5, (px[..., 1] + 0.5 - self.top) * k - 0.5], axis=-1
        )

    def crop_to_pixels(self, cp):
        cp = np.asarray(cp, dtype=np.float64)
        k = self.zoom
        return np.stack(
            [(cp[..., 0] + 0.5) / k + self.left - 0.5, (cp[..., 1] + 0.5) / k + self.top - 0.5], axis=-1
        )

    def apply_normalized(self, uv):
        """Map normalized input-image coordinates to normalized crop coordinates."""
        return from_pixels(self.pixels_to_crop(to_pixels(uv, self.in_resolution)), self.out_resolution)

    def invert_normalized(self, uv):
        return from_pixels(self.crop_to_pixels(to_pixels(uv, self.out_resolution)), self.in_resolution)

    def normalized_affine(self):
        """(scale, (offset_u, offset_v)) with crop_uv = scale * uv + offset."""
        scale = self.zoom * (self.in_resolution - 1) / (self.out_resolution - 1)
        offset = self.apply_normalized(np.zeros(2))
        return scale, (float(offset[0]), float(offset[1]))

    def camera_to_crop(self, cam):
        scale, offset = self.normalized_affine()
        return transform_camera(cam, scale, offset)

    def camera_from_crop(self, cam):
        scale, (bu, bv) = self.normalized_affine()
        return transform_camera(cam, 1.0 / scale, (-bu / scale, -bv / scale))


def detect_bbox_and_crop(sketch, out_resolution, margin=0.1):
    """Crop the stroke bounding box (plus margin, squared) and resample it.

    Returns the cropped sketch and the :class:`CropTransform` used.
    """
    sketch = np.asarray(sketch)
    if out_resolution < 2:
        raise ValueError("out_resolution must be >= 2")
    ink = ink_mask(sketch)
    if not ink.any():
        raise NoBodyFoundError("no body found: the sketch has no stroke pixels")
    rows = np.flatnonzero(ink.any(axis=1))
    cols = np.flatnonzero(ink.any(axis=0))
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    w, h = x1 - x0, y1 - y0
    left, right = x0 - margin * w, x1 + margin * w
    top, bottom = y0 - margin * h, y1 + margin * h
    side = max(right - left, bottom - top)
    cx, cy = (left + right) / 2.0, (top + bottom) / 2.0
    transform = CropTransform(cx - side / 2.0, cy - side / 2.0, side, sketch.shape[0], out_resolution)
    return resample_crop(sketch, transform), transform


def resample_crop(image, transform):
    """Nearest-neighbour resampling; outside the input reads as paper."""
    image = np.asarray(image)
    n = transform.out_resolution
    centres = (np.arange(n) + 0.5) / transform.zoom
    src_c = np.floor(transform.left + centres).astype(np.int64)
    src_r = np.floor(transform.top + centres).astype(np.int64)
    h, w = image.shape
    valid_r = (src_r >= 0) & (src_r < h)
    valid_c = (src_c >= 0) & (src_c < w)
    out = np.full((n, n), PAPER, dtype=np.uint8)
    sub = image[np.clip(src_r, 0, h - 1)][:, np.clip(src_c, 0, w - 1)]
    keep = valid_r[:, None] & valid_c[None, :]
    out[keep] = sub[keep]
    return np.where(out < 128, INK, PAPER).astype(np.uint8)


def yawed_theta(theta, view_angle):
    theta = np.array(theta, dtype=np.float64)
    if view_angle:
        root = Rotation.from_rotvec(theta[:3])
        theta[:3] = (Rotation.from_rotvec([0.0, view_angle, 0.0]) * root).as_rotvec()
    return theta


def generate_synthetic_sample(spec, params, cam, resolution, view_angle=0.0, margin=0.1, dilation=0):
    """Render a fully annotated synthetic sketch.

    The view yaw (about +y) is folded into the root orientation. The body is
    rendered once to find its stroke bounding box, then re-rendered directly
    in the crop frame, so the stored camera, 2-D joints and strokes agree
    exactly. Raises :class:`OffscreenError` when nothing is visible.
    """
    cam = cam if isinstance(cam, CameraParams) else CameraParams.from_vector(cam)
    theta = yawed_theta(params.theta, view_angle)
    beta = np.array(params.beta, dtype=np.float64)
    verts, joints = smpl_forward_np(spec, theta, beta)
    mask = rasterize_silhouette(verts, spec.faces, cam, resolution)
    if not mask.any():
        raise OffscreenError("the projected body covers no pixels")
    _, crop = detect_bbox_and_crop(extract_edges(mask), resolution, margin)
    crop_cam = crop.camera_to_crop(cam)
    crop_mask = rasterize_silhouette(verts, spec.faces, crop_cam, resolution)
    return SketchSample(
        image=extract_edges(crop_mask, dilation),
        source="synthetic",
        theta=theta,
        beta=beta,
        cam=crop_cam.as_array(),
        joints3d=joints,
        joints2d=project_np(joints, crop_cam),
        mesh_vertices=verts,
        joint_mask=np.ones(spec.K, dtype=bool),
        meta={"view_angle": float(view_angle)},
    )


def pseudo_freehand(sketch, rng, dropout=0.08, jitter=0.3, block=4):
    """Degrade a synthetic sketch: drop stroke blocks and jitter stroke pixels."""
    ink = ink_mask(sketch)
    n = ink.shape[0]
    nb = -(-n // block)
    keep_block = rng.random((nb, nb)) >= dropout
    keep = np.kron(keep_block, np.ones((block, block), dtype=bool))[:n, :n]
    rows, cols = np.nonzero(ink & keep)
    move = rng.random(rows.size) < jitter
    dr = np.where(move, rng.integers(-1, 2, rows.size), 0)
    dc = np.where(move, rng.integers(-1, 2, cols.size), 0)
    out = np.full_like(np.asarray(sketch, dtype=np.uint8), PAPER)
    out[np.clip(rows + dr, 0, n - 1), np.clip(cols + dc, 0, n - 1)] = INK
    return out


def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise PGMError("PGM images must be 2-D uint8 arrays")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"{path}: malformed header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise PGMError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    payload = data[pos + 1 :]
    if len(payload) != w * h:
        raise PGMError(f"{path}: size mismatch, expected {w * h} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
