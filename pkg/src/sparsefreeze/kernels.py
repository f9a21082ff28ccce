"""Kernel backend selection.

The compiled extension is used when importable; otherwise the numpy
fallback. Set ``SPARSEFREEZE_PURE_PYTHON=1`` to force the fallback.
"""
import importlib
import os

import numpy as np

from . import _kernels_py


def load_backend(name):
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("sparsefreeze._kernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.append("cython")
    return names


if os.environ.get("SPARSEFREEZE_PURE_PYTHON", "") not in ("", "0"):
    BACKEND = "python"
else:
    BACKEND = available_backends()[-1]
_impl = load_backend(BACKEND)


def im2col(x, kh, kw, stride, padding, out_h, out_w):
    return _impl.im2col(np.ascontiguousarray(x), kh, kw, stride, padding, out_h, out_w)


def col2im(cols, x_shape, kh, kw, stride, padding, out_h, out_w):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(int(v) for v in x_shape),
                        kh, kw, stride, padding, out_h, out_w)


def sgd_momentum_masked(w, g, buf, mask, lr, momentum, weight_decay):
    """Masked momentum-SGD step with decoupled weight decay, in place on ``w``/``buf``.

    All arrays must be C-contiguous and share shape; ``mask`` is a bool array.
    """
    dt = w.dtype.type
    _impl.sgd_momentum_masked(
        w.reshape(-1), np.ascontiguousarray(g, dtype=w.dtype).reshape(-1), buf.reshape(-1),
        mask.reshape(-1).view(np.uint8), dt(lr), dt(momentum), dt(lr * weight_decay))
