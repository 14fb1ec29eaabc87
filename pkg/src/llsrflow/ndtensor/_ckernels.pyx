# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for conv2d, with zero padding folded in.

Both arrays are C-contiguous; the loops walk the patch array in memory order
and index the image through a row pointer.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef void _im2col_impl(const real* x, real* cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
                       Py_ssize_t w, Py_ssize_t k, Py_ssize_t ho, Py_ssize_t wo,
                       Py_ssize_t stride, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t ci, i, j, ni, y, xx, sy, sx, lo, hi
    cdef const real* row
    cdef real* out = cols
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                # valid output columns: 0 <= xx*stride + j - pad < w
                lo = 0
                while lo < wo and lo * stride + j - pad < 0:
                    lo += 1
                hi = wo
                while hi > lo and (hi - 1) * stride + j - pad >= w:
                    hi -= 1
                for ni in range(n):
                    for y in range(ho):
                        sy = y * stride + i - pad
                        if sy < 0 or sy >= h:
                            for xx in range(wo):
                                out[xx] = 0
                        else:
                            row = x + ((ni * c + ci) * h + sy) * w + j - pad
                            for xx in range(lo):
                                out[xx] = 0
                            for xx in range(lo, hi):
                                out[xx] = row[xx * stride]
                            for xx in range(hi, wo):
                                out[xx] = 0
                        out += wo


cdef void _col2im_impl(const real* cols, real* x, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
                       Py_ssize_t w, Py_ssize_t k, Py_ssize_t ho, Py_ssize_t wo,
                       Py_ssize_t stride, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t ci, i, j, ni, y, xx, sy, lo, hi
    cdef real* row
    cdef const real* src = cols
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                lo = 0
                while lo < wo and lo * stride + j - pad < 0:
                    lo += 1
                hi = wo
                while hi > lo and (hi - 1) * stride + j - pad >= w:
                    hi -= 1
                for ni in range(n):
                    for y in range(ho):
                        sy = y * stride + i - pad
                        if sy >= 0 and sy < h:
                            row = x + ((ni * c + ci) * h + sy) * w + j - pad
                            for xx in range(lo, hi):
                                row[xx * stride] += src[xx]
                        src += wo


def _im2col(const real[:, :, :, ::1] x, real[:, :, :, :, :, ::1] cols, int stride, int pad):
    _im2col_impl(&x[0, 0, 0, 0], &cols[0, 0, 0, 0, 0, 0], x.shape[0], x.shape[1], x.shape[2],
                 x.shape[3], cols.shape[1], cols.shape[4], cols.shape[5], stride, pad)


def _col2im(const real[:, :, :, :, :, ::1] cols, real[:, :, :, ::1] x, int stride, int pad):
    _col2im_impl(&cols[0, 0, 0, 0, 0, 0], &x[0, 0, 0, 0], x.shape[0], x.shape[1], x.shape[2],
                 x.shape[3], cols.shape[1], cols.shape[4], cols.shape[5], stride, pad)


def im2col(x, int k, int stride, int pad, int ho, int wo):
    """(N, C, H, W) -> (C, K, K, N, Ho, Wo) patches of the zero-padded input."""
    x = np.ascontiguousarray(x)
    cols = np.empty((x.shape[1], k, k, x.shape[0], ho, wo), dtype=x.dtype)
    _im2col(x, cols, stride, pad)
    return cols


def col2im(cols, int h, int w, int stride, int pad):
    """Adjoint of im2col: scatter-add patches back onto an (N, C, H, W) grid."""
    cols = np.ascontiguousarray(cols)
    x = np.zeros((cols.shape[3], cols.shape[0], h, w), dtype=cols.dtype)
    _col2im(cols, x, stride, pad)
    return x
