"""Numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable. Results are
bitwise identical to the compiled versions: accumulation order in
``col2im`` and the operation order in ``sgd_momentum_masked`` match.
"""
import numpy as np


def im2col(x, kh, kw, stride, padding, out_h, out_w):
    """Expand ``x[B, C, H, W]`` into patches of shape ``[B*Ho*Wo, C*kh*kw]``."""
    b, c, h, w = x.shape
    if padding:
        xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    cols = np.empty((b, out_h, out_w, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * out_h
        for j in range(kw):
            j_end = j + stride * out_w
            cols[:, :, :, :, i, j] = xp[:, :, i:i_end:stride, j:j_end:stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * out_h * out_w, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, padding, out_h, out_w):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to ``x_shape``."""
    b, c, h, w = x_shape
    cols6 = cols.reshape(b, out_h, out_w, c, kh, kw)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * out_h
        for j in range(kw):
            j_end = j + stride * out_w
            dxp[:, :, i:i_end:stride, j:j_end:stride] += cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])
    return dxp


def sgd_momentum_masked(w, g, buf, mask, lr, momentum, lr_wd):
    """In-place masked SGD step on flat contiguous arrays.

    ``buf = momentum*buf + g``; ``w = (w - lr*buf) - lr_wd*w``; masked
    coordinates of ``w`` and ``buf`` are set to zero.
    """
    dt = w.dtype.type
    lr, momentum, lr_wd = dt(lr), dt(momentum), dt(lr_wd)
    off = mask == 0
    buf *= momentum
    buf += g
    buf[off] = 0
    decay = w * lr_wd
    w -= lr * buf
    w -= decay
    w[off] = 0
