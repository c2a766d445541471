"""Pure-numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` operation for operation so that both backends
produce bit-identical results (same copy layout, same summation order).
"""

import numpy as np


def im2col(x, k, stride, pad):
    """Expand ``x`` (N, C, H, W) into a (C*k*k, N*Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, k, k) -> (C, k, k, N, Ho, Wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, k, stride, pad):
    """Scatter-add a patch matrix back onto an (N, C, H, W) image."""
    n, c, h, w = shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols6 = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                cols6[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def rasterize(points, faces, resolution):
    """Binary coverage of triangles over pixel centres.

    ``points`` are (V, 2) continuous pixel coordinates (column, row) where the
    centre of pixel (r, c) sits at (c, r). Edges are inclusive; zero-area
    triangles are skipped.
    """
    mask = np.zeros((resolution, resolution), dtype=np.uint8)
    pts = np.asarray(points, dtype=np.float64)
    for f in np.asarray(faces, dtype=np.int64):
        ax, ay = pts[f[0]]
        bx, by = pts[f[1]]
        cx, cy = pts[f[2]]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = max(int(np.ceil(min(ax, bx, cx))), 0)
        x1 = min(int(np.floor(max(ax, bx, cx))), resolution - 1)
        y0 = max(int(np.ceil(min(ay, by, cy))), 0)
        y1 = min(int(np.floor(max(ay, by, cy))), resolution - 1)
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        if area > 0:
            inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        else:
            inside = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
        mask[y0 : y1 + 1, x0 : x1 + 1] |= inside.astype(np.uint8)
    return mask
