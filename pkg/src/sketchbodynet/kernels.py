"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``SKETCHBODYNET_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SKETCHBODYNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def use_backend(name):
    """Switch backends at runtime ("compiled" or "python"); returns the previous one."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "compiled":
        from . import _kernels as compiled

        _impl = compiled
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return previous


def im2col(x, k, stride, pad):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), tuple(shape), k, stride, pad)


def rasterize(points, faces, resolution):
    """uint8 coverage mask of triangles given in pixel coordinates."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if points.ndim != 2 or points.shape[1] != 2 or faces.ndim != 2 or faces.shape[1] != 3:
        raise ValueError(f"expected (V, 2) points and (F, 3) faces, got {points.shape} and {faces.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= len(points)):
        raise ValueError("face indices out of range")
    return _impl.rasterize(points, faces, int(resolution))
