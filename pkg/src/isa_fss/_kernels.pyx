# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled patch extraction (im2col) and its adjoint (col2im).

Inputs arrive zero-padded and C-contiguous float64. Row index of the patch
matrix is ``(ci * kh + ky) * kw + kx``; column index is ``y * out_w + x``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride, int out_h, int out_w):
    cdef Py_ssize_t n_batch = xp.shape[0], c_in = xp.shape[1]
    cols_arr = np.empty((n_batch, c_in * kh * kw, out_h * out_w), dtype=np.float64)
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, ci, ky, kx, y, x, row, iy, base
    with nogil:
        for n in range(n_batch):
            for ci in range(c_in):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (ci * kh + ky) * kw + kx
                        for y in range(out_h):
                            iy = y * stride + ky
                            base = y * out_w
                            for x in range(out_w):
                                cols[n, row, base + x] = xp[n, ci, iy, x * stride + kx]
    return cols_arr


def col2im(const double[:, :, ::1] cols, int c_in, int padded_h, int padded_w,
           int kh, int kw, int stride, int out_h, int out_w):
    cdef Py_ssize_t n_batch = cols.shape[0]
    gx_arr = np.zeros((n_batch, c_in, padded_h, padded_w), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, ci, ky, kx, y, x, row, iy, base
    with nogil:
        for n in range(n_batch):
            for ci in range(c_in):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (ci * kh + ky) * kw + kx
                        for y in range(out_h):
                            iy = y * stride + ky
                            base = y * out_w
                            for x in range(out_w):
                                gx[n, ci, iy, x * stride + kx] += cols[n, row, base + x]
    return gx_arr
