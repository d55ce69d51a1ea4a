"""Pure numpy fallback for the hot gather/scatter kernels.

Same contracts as the compiled module: im2col/col2im lower 2D convolution to
matrix products, and the bilinear pair implements align-corners=false
resampling with clamped borders. Forward results are bit-identical to the
compiled backend (same arithmetic in the same order); scatter-add backward
results can differ in the last bits because accumulation order differs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _axis_tables(n_in, n_out, dtype):
    """Source indices and fractional weights for one resampled axis.

    Sample centers sit at (i + 0.5) * n_in / n_out - 0.5, clamped to the
    valid range so border samples replicate the edge.
    """
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, float(n_in - 1))
    i0 = np.floor(pos).astype(np.intp)
    np.minimum(i0, n_in - 1, out=i0)
    frac = (pos - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def im2col(x, k, stride, padding):
    """Unfold (C, H, W) into a (C*k*k, H_out*W_out) patch matrix.

    Row order is (channel, kernel_row, kernel_col); column order is row-major
    over output pixels. Padding is zero-filled.
    """
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = windows.shape[1:3]
    return np.ascontiguousarray(
        windows.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    )


def col2im(cols, c, h, w, k, stride, padding):
    """Scatter-add the adjoint of im2col back onto a (c, h, w) grid."""
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    dx = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, ho, wo)
    for ky in range(k):
        for kx in range(k):
            # fixed (ky, kx) hits a non-overlapping strided slice, so += is safe
            dx[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += cols[:, ky, kx]
    if padding:
        dx = dx[:, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dx)


def upsample_bilinear(x, out_h, out_w):
    """Resample (C, H, W) to (C, out_h, out_w); exact for constant inputs."""
    c, h, w = x.shape
    y0, y1, fy = _axis_tables(h, out_h, x.dtype)
    x0, x1, fx = _axis_tables(w, out_w, x.dtype)
    r0 = x[:, y0, :]
    r1 = x[:, y1, :]
    a = r0[:, :, x0]
    top = a + fx * (r0[:, :, x1] - a)
    a = r1[:, :, x0]
    bot = a + fx * (r1[:, :, x1] - a)
    return top + fy[:, None] * (bot - top)


def upsample_bilinear_grad(g, in_h, in_w):
    """Scatter the output gradient (C, out_h, out_w) back to (C, in_h, in_w)."""
    c, oh, ow = g.shape
    y0, y1, fy = _axis_tables(in_h, oh, g.dtype)
    x0, x1, fx = _axis_tables(in_w, ow, g.dtype)
    wy1 = fy[:, None]
    wy0 = 1 - wy1
    wx1 = fx
    wx0 = 1 - fx
    ci = np.arange(c)[:, None, None]
    dx = np.zeros((c, in_h, in_w), dtype=g.dtype)
    np.add.at(dx, (ci, y0[None, :, None], x0[None, None, :]), g * (wy0 * wx0))
    np.add.at(dx, (ci, y0[None, :, None], x1[None, None, :]), g * (wy0 * wx1))
    np.add.at(dx, (ci, y1[None, :, None], x0[None, None, :]), g * (wy1 * wx0))
    np.add.at(dx, (ci, y1[None, :, None], x1[None, None, :]), g * (wy1 * wx1))
    return dx
