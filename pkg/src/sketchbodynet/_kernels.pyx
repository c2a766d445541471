# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: convolution patch expansion and triangle coverage.

Arithmetic order matches ``_kernels_py`` exactly; build with
``-ffp-contract=off`` so no fused multiply-adds change the rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((c * k * k, n * ho * wo), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, b, oi, oj, row, col, ii, jj
    with nogil:
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    col = 0
                    for b in range(n):
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            for oj in range(wo):
                                jj = oj * stride + kj - pad
                                if 0 <= ii < h and 0 <= jj < w:
                                    out[row, col] = x[b, ci, ii, jj]
                                col += 1
    return out_arr


def col2im(double[:, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, ki, kj, b, oi, oj, row, col, ii, jj
    with nogil:
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    col = 0
                    for b in range(n):
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            for oj in range(wo):
                                jj = oj * stride + kj - pad
                                if 0 <= ii < h and 0 <= jj < w:
                                    out[b, ci, ii, jj] += cols[row, col]
                                col += 1
    return out_arr


def rasterize(points, faces, int resolution):
    cdef double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef long long[:, ::1] fcs = np.ascontiguousarray(faces, dtype=np.int64)
    mask_arr = np.zeros((resolution, resolution), dtype=np.uint8)
    cdef unsigned char[:, ::1] mask = mask_arr
    cdef Py_ssize_t f, nf = fcs.shape[0]
    cdef double ax, ay, bx, by, cx, cy, area, px, py, e0, e1, e2
    cdef long x0, x1, y0, y1, xi, yi
    with nogil:
        for f in range(nf):
            ax = pts[fcs[f, 0], 0]; ay = pts[fcs[f, 0], 1]
            bx = pts[fcs[f, 1], 0]; by = pts[fcs[f, 1], 1]
            cx = pts[fcs[f, 2], 0]; cy = pts[fcs[f, 2], 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if area == 0.0:
                continue
            x0 = <long>ceil(min(ax, min(bx, cx)))
            x1 = <long>floor(max(ax, max(bx, cx)))
            y0 = <long>ceil(min(ay, min(by, cy)))
            y1 = <long>floor(max(ay, max(by, cy)))
            if x0 < 0:
                x0 = 0
            if y0 < 0:
                y0 = 0
            if x1 > resolution - 1:
                x1 = resolution - 1
            if y1 > resolution - 1:
                y1 = resolution - 1
            for yi in range(y0, y1 + 1):
                py = <double>yi
                for xi in range(x0, x1 + 1):
                    px = <double>xi
                    e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                    e1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                    e2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                    if area > 0:
                        if e0 >= 0 and e1 >= 0 and e2 >= 0:
                            mask[yi, xi] = 1
                    elif e0 <= 0 and e1 <= 0 and e2 <= 0:
                        mask[yi, xi] = 1
    return mask_arr
