# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels: convolution lowering and bilinear resampling.

Mirrors tunet.kernels.reference exactly: same layouts, same sampling rule,
same arithmetic order in the forward passes.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline object _dtype_of(bint is_double):
    return np.float64 if is_double else np.float32


def im2col(real[:, :, ::1] x, int k, int stride, int padding):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - k) // stride + 1
    out_np = np.zeros((c * k * k, ho * wo), dtype=_dtype_of(real is double))
    cdef real[:, ::1] cols = out_np
    cdef Py_ssize_t ci, ky, kx, oy, ox, iy, ix, row, base
    for ci in range(c):
        for ky in range(k):
            for kx in range(k):
                row = (ci * k + ky) * k + kx
                for oy in range(ho):
                    iy = oy * stride - padding + ky
                    if iy < 0 or iy >= h:
                        continue
                    base = oy * wo
                    for ox in range(wo):
                        ix = ox * stride - padding + kx
                        if 0 <= ix < w:
                            cols[row, base + ox] = x[ci, iy, ix]
    return out_np


def col2im(real[:, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           int k, int stride, int padding):
    cdef Py_ssize_t ho = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - k) // stride + 1
    out_np = np.zeros((c, h, w), dtype=_dtype_of(real is double))
    cdef real[:, :, ::1] dx = out_np
    cdef Py_ssize_t ci, ky, kx, oy, ox, iy, ix, row, base
    for ci in range(c):
        for ky in range(k):
            for kx in range(k):
                row = (ci * k + ky) * k + kx
                for oy in range(ho):
                    iy = oy * stride - padding + ky
                    if iy < 0 or iy >= h:
                        continue
                    base = oy * wo
                    for ox in range(wo):
                        ix = ox * stride - padding + kx
                        if 0 <= ix < w:
                            dx[ci, iy, ix] += cols[row, base + ox]
    return out_np


def upsample_bilinear(real[:, :, ::1] x, Py_ssize_t out_h, Py_ssize_t out_w):
    from tunet.kernels.reference import _axis_tables
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    dtype = _dtype_of(real is double)
    y0_np, y1_np, fy_np = _axis_tables(h, out_h, dtype)
    x0_np, x1_np, fx_np = _axis_tables(w, out_w, dtype)
    cdef Py_ssize_t[::1] y0 = y0_np, y1 = y1_np, x0 = x0_np, x1 = x1_np
    cdef real[::1] fy = fy_np, fx = fx_np
    out_np = np.empty((c, out_h, out_w), dtype=dtype)
    cdef real[:, :, ::1] out = out_np
    cdef Py_ssize_t ci, oy, ox, iy0, iy1
    cdef real a, top, bot, f
    for ci in range(c):
        for oy in range(out_h):
            iy0 = y0[oy]
            iy1 = y1[oy]
            f = fy[oy]
            for ox in range(out_w):
                a = x[ci, iy0, x0[ox]]
                top = a + fx[ox] * (x[ci, iy0, x1[ox]] - a)
                a = x[ci, iy1, x0[ox]]
                bot = a + fx[ox] * (x[ci, iy1, x1[ox]] - a)
                out[ci, oy, ox] = top + f * (bot - top)
    return out_np


def upsample_bilinear_grad(real[:, :, ::1] g, Py_ssize_t in_h, Py_ssize_t in_w):
    from tunet.kernels.reference import _axis_tables
    cdef Py_ssize_t c = g.shape[0], oh = g.shape[1], ow = g.shape[2]
    dtype = _dtype_of(real is double)
    y0_np, y1_np, fy_np = _axis_tables(in_h, oh, dtype)
    x0_np, x1_np, fx_np = _axis_tables(in_w, ow, dtype)
    cdef Py_ssize_t[::1] y0 = y0_np, y1 = y1_np, x0 = x0_np, x1 = x1_np
    cdef real[::1] fy = fy_np, fx = fx_np
    out_np = np.zeros((c, in_h, in_w), dtype=dtype)
    cdef real[:, :, ::1] dx = out_np
    cdef Py_ssize_t ci, oy, ox, iy0, iy1, ix0, ix1
    cdef real gy, wy0, wy1, wx0, wx1
    for ci in range(c):
        for oy in range(oh):
            iy0 = y0[oy]
            iy1 = y1[oy]
            wy1 = fy[oy]
            wy0 = <real>1 - wy1
            for ox in range(ow):
                ix0 = x0[ox]
                ix1 = x1[ox]
                wx1 = fx[ox]
                wx0 = <real>1 - wx1
                gy = g[ci, oy, ox]
                dx[ci, iy0, ix0] += gy * (wy0 * wx0)
                dx[ci, iy0, ix1] += gy * (wy0 * wx1)
                dx[ci, iy1, ix0] += gy * (wy1 * wx0)
                dx[ci, iy1, ix1] += gy * (wy1 * wx1)
    return out_np
