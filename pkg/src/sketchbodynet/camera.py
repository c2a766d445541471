"""Weak-perspective camera and the normalized <-> pixel convention.

Normalized image coordinates span [-1, 1] on both axes with +v up. Pixel
coordinates are continuous (column, row) with row 0 at the top and the
centre of pixel (r, c) at (c, r), so u = -1 maps to column 0 and u = +1 to
column R - 1.
"""

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc


@dataclass(frozen=True)
class CameraParams:
    s: float
    tx: float
    ty: float

    @classmethod
    def from_vector(cls, v):
        s, tx, ty = (float(x) for x in np.asarray(v, dtype=np.float64).reshape(3))
        return cls(s, tx, ty)

    def as_array(self):
        return np.array([self.s, self.tx, self.ty])


def project(points3d, cam):
    """(u, v) = s * (x + tx, y + ty); z is dropped.

    ``cam`` is a CameraParams, a length-3 array/Tensor, or an (N, 3) batch
    paired with (N, P, 3) points. Differentiable in both arguments.
    """
    if isinstance(cam, CameraParams):
        cam = cam.as_array()
    pts = gc.as_tensor(points3d)
    cam = gc.as_tensor(cam)
    xy = gc.getitem(pts, (Ellipsis, slice(0, 2)))
    if cam.ndim == 1:
        s = gc.getitem(cam, slice(0, 1))
        t = gc.getitem(cam, slice(1, 3))
    else:
        n = cam.shape[0]
        s = gc.reshape(gc.getitem(cam, (slice(None), slice(0, 1))), (n, 1, 1))
        t = gc.reshape(gc.getitem(cam, (slice(None), slice(1, 3))), (n, 1, 2))
    return (xy + t) * s


def project_np(points3d, cam):
    with gc.no_grad():
        return project(np.asarray(points3d, dtype=np.float64), cam).data


def to_pixels(uv, resolution):
    uv = np.asarray(uv, dtype=np.float64)
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    half = (resolution - 1) / 2.0
    return np.stack([(uv[..., 0] + 1.0) * half, (1.0 - uv[..., 1]) * half], axis=-1)


def from_pixels(px, resolution):
    px = np.asarray(px, dtype=np.float64)
    half = (resolution - 1) / 2.0
    if half == 0:
        return np.zeros_like(px)
    return np.stack([px[..., 0] / half - 1.0, 1.0 - px[..., 1] / half], axis=-1)


def transform_camera(cam, scale, offset):
    """Camera whose projections equal ``scale * project(., cam) + offset``.

    Weak perspective is closed under in-plane similarity maps, which is what
    image cropping and resizing apply.
    """
    cam = cam if isinstance(cam, CameraParams) else CameraParams.from_vector(cam)
    bu, bv = offset
    s_new = scale * cam.s
    return CameraParams(s_new, cam.tx + bu / s_new, cam.ty + bv / s_new)
