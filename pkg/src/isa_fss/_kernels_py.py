"""Pure numpy im2col/col2im; same signatures as the compiled ``_kernels`` module."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, out_h, out_w):
    n_batch, c_in = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * out_h : stride, : stride * out_w : stride]
    # (N, C, oh, ow, kh, kw) -> (N, C, kh, kw, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n_batch, c_in * kh * kw, out_h * out_w)
    return np.ascontiguousarray(cols)


def col2im(cols, c_in, padded_h, padded_w, kh, kw, stride, out_h, out_w):
    n_batch = cols.shape[0]
    gx = np.zeros((n_batch, c_in, padded_h, padded_w))
    taps = cols.reshape(n_batch, c_in, kh, kw, out_h, out_w)
    for ky in range(kh):
        for kx in range(kw):
            gx[:, :, ky : ky + stride * out_h : stride, kx : kx + stride * out_w : stride] += taps[
                :, :, ky, kx
            ]
    return gx
