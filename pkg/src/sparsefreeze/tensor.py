"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the layer types the desk models need are supported: affine, 2D
convolution, ReLU, flatten, global average pooling, elementwise masking
and softmax cross-entropy.

Usage::

    with Tape() as tape:
        loss = softmax_cross_entropy(affine(x, w, b), labels)
    grads = tape.backward(loss)   # {Tensor: ndarray}

Operations only record onto the active tape when at least one input
requires a gradient, so a frozen network prefix is evaluated without
building any backward state.
"""
from __future__ import annotations

from collections import namedtuple

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, UsageError

PRECISIONS = {32: np.float32, 64: np.float64}

_Node = namedtuple("_Node", "op inputs output backward")
_active_tapes = []


def dtype_for(precision):
    try:
        return PRECISIONS[int(precision)]
    except (KeyError, ValueError):
        raise ConfigError(f"precision must be 32 or 64, got {precision!r}", "tensor-autodiff") from None


class Tensor:
    """A float32/float64 ndarray plus autodiff bookkeeping.

    Hashing is by identity so tensors can key the gradient map.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self):
        return 8 * self.data.dtype.itemsize

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"


class Tape:
    """Records operations for one forward pass; ``backward`` may run once."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss):
        """Return ``{leaf tensor: gradient}`` for every leaf that requires grad."""
        if self._consumed:
            raise UsageError("backward called twice on the same tape", "tensor-autodiff")
        self._consumed = True
        if loss.data.size != 1:
            raise UsageError("backward needs a scalar loss", "tensor-autodiff")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves = {}
        for node in self.nodes:
            produced.add(id(node.output))
        # nodes were appended in execution order, which is a topological order
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            g_in = node.backward(g_out)
            for inp, g in zip(node.inputs, g_in):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        return {t: grads[k] for k, t in leaves.items()}


def _needs_grad(*inputs):
    return bool(_active_tapes) and any(t.requires_grad for t in inputs)


def _result(op, inputs, data, backward):
    track = _needs_grad(*inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _active_tapes[-1].record(op, inputs, out, backward)
    return out


def affine(x, w, b=None):
    """``y[i, j] = sum_k x[i, k] * w[k, j] + b[j]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigError(f"affine shape mismatch: x{x.shape} @ w{w.shape}", "tensor-autodiff")
    if b is not None and b.shape != (w.shape[1],):
        raise ConfigError(f"affine bias shape {b.shape} != ({w.shape[1]},)", "tensor-autodiff")
    y = x.data @ w.data
    if b is not None:
        y += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result("affine", inputs, y, backward)


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv output size ({size} + 2*{padding} - {kernel})/{stride} + 1 is not a positive integer",
            "tensor-autodiff")
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x[B, Cin, H, W]`` with ``w[Cout, Cin, Kh, Kw]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"conv2d shape mismatch: x{x.shape}, w{w.shape}", "tensor-autodiff")
    bsz, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wid, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    y = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = None
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if x.requires_grad:
            gx = kernels.col2im(gmat @ wmat, x.shape, kh, kw, stride, padding, ho, wo)
        if b is None:
            return gx, gw
        gb = gmat.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result("conv2d", inputs, y, backward)


def relu(x):
    on = x.data > 0
    return _result("relu", (x,), np.where(on, x.data, 0).astype(x.dtype, copy=False),
                   lambda g: (g * on,))


def flatten(x):
    shape = x.shape
    return _result("flatten", (x,), x.data.reshape(shape[0], -1), lambda g: (g.reshape(shape),))


def global_avg_pool(x):
    """``[B, C, H, W] -> [B, C]`` spatial mean."""
    shape = x.shape
    area = shape[2] * shape[3]

    def backward(g):
        return (np.broadcast_to((g / area)[:, :, None, None], shape).astype(g.dtype),)

    return _result("gap", (x,), x.data.mean(axis=(2, 3)), backward)


def masked(w, mask):
    """Elementwise ``w * mask``; the gradient is masked the same way."""
    m = mask.astype(w.dtype)
    return _result("mask", (w,), w.data * m, lambda g: (g * m,))


def tsum(x):
    return _result("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                   lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def scale(x, c):
    return _result("scale", (x,), x.data * x.dtype.type(c), lambda g: (g * x.dtype.type(c),))


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Batch-mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError(f"logits {logits.shape} and labels {labels.shape} do not conform", "tensor-autodiff")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c})", "tensor-autodiff")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _result("softmax_xent", (logits,), loss, backward)
