# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contracts as ``_kernels_py``."""
import numpy as np
from cython cimport floating


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t padding, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B * out_h * out_w, C * kh * kw), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t b, oh, ow, c, i, j, r, col, hh, ww
    with nogil:
        for b in range(B):
            for oh in range(out_h):
                for ow in range(out_w):
                    r = (b * out_h + oh) * out_w + ow
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            hh = oh * stride + i - padding
                            for j in range(kw):
                                ww = ow * stride + j - padding
                                if 0 <= hh < H and 0 <= ww < W:
                                    cols[r, col] = x[b, c, hh, ww]
                                else:
                                    cols[r, col] = 0
                                col += 1
    return out


def col2im(floating[:, ::1] cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t padding, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oh, ow, c, i, j, r, hh, ww
    # (i, j) outermost: each dx element accumulates in the same order as the numpy path
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(B):
                    for c in range(C):
                        for oh in range(out_h):
                            hh = oh * stride + i - padding
                            if hh < 0 or hh >= H:
                                continue
                            for ow in range(out_w):
                                ww = ow * stride + j - padding
                                if ww < 0 or ww >= W:
                                    continue
                                r = (b * out_h + oh) * out_w + ow
                                dx[b, c, hh, ww] += cols[r, (c * kh + i) * kw + j]
    return out


def sgd_momentum_masked(floating[::1] w, floating[::1] g, floating[::1] buf,
                        const unsigned char[::1] mask, floating lr, floating momentum,
                        floating lr_wd):
    cdef Py_ssize_t n = w.shape[0], k
    cdef floating b, wi, d
    with nogil:
        for k in range(n):
            if mask[k]:
                b = momentum * buf[k]
                b = b + g[k]
                buf[k] = b
                wi = w[k]
                d = wi * lr_wd
                wi = wi - lr * b
                wi = wi - d
                w[k] = wi
            else:
                buf[k] = 0
                w[k] = 0
