"""Measurement tools over sparse checkpoints: mask overlap, linear CKA, gradient norms."""
from __future__ import annotations

import numpy as np

from .errors import UndefinedSimilarity, UsageError


def _weights_and_mask(layer):
    if hasattr(layer, "mask"):
        return np.asarray(layer.weights), np.asarray(layer.mask, dtype=bool)
    w = np.asarray(layer)
    return w, w != 0


def top_positions(weights, mask, fraction):
    """Flat indices of the ``round(fraction * nnz)`` largest-magnitude active weights.

    Ties keep the lower flat index.
    """
    active = np.flatnonzero(mask.reshape(-1))
    k = int(np.floor(fraction * active.size + 0.5))
    order = np.argsort(-np.abs(weights.reshape(-1)[active]), kind="stable")
    return active[order[:k]]


def structural_similarity(intermediate, final, top_fraction=0.5, symmetric=False):
    """Share of the intermediate layer's top weights that are still nonzero in ``final``.

    Both arguments are ``MaskedLayer`` objects or plain weight arrays (nonzero
    entries taken as the mask). With ``symmetric`` the final layer is also
    reduced to its own top fraction before intersecting.
    """
    if not 0 < top_fraction <= 1:
        raise UsageError(f"top_fraction must be in (0, 1], got {top_fraction}", "analysis")
    wi, mi = _weights_and_mask(intermediate)
    wf, mf = _weights_and_mask(final)
    if wi.shape != wf.shape:
        raise UsageError(f"shape mismatch {wi.shape} vs {wf.shape}", "analysis")
    top = top_positions(wi, mi, top_fraction)
    if top.size == 0:
        return 0.0
    if symmetric:
        ref = np.zeros(wf.size, dtype=bool)
        ref[top_positions(wf, mf, top_fraction)] = True
    else:
        ref = mf.reshape(-1)
    return float(np.count_nonzero(ref[top])) / top.size


def block_similarity(inter_net, final_net, top_fraction=0.5, masked_only=True):
    """Mean structural similarity per block; dense layers are skipped when ``masked_only``."""
    out = {}
    for bi, bf in zip(inter_net.blocks, final_net.blocks):
        vals = [structural_similarity(li, lf, top_fraction)
                for li, lf in zip(bi.layers, bf.layers) if not (masked_only and lf.dense)]
        if vals:
            out[bi.index] = float(np.mean(vals))
    return out


def _centered(x):
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(X, Y):
    """Linear centered kernel alignment between activations ``X[n, p1]`` and ``Y[n, p2]``."""
    X, Y = _centered(X), _centered(Y)
    if X.shape[0] != Y.shape[0] or X.shape[0] < 2:
        raise UsageError(f"CKA needs matching sample counts >= 2, got {X.shape[0]} and {Y.shape[0]}",
                         "analysis")
    cross = np.linalg.norm(Y.T @ X) ** 2
    nx = np.linalg.norm(X.T @ X)
    ny = np.linalg.norm(Y.T @ Y)
    if nx == 0 or ny == 0:
        raise UndefinedSimilarity("CKA undefined for zero-variance activations", "analysis")
    return float(cross / (nx * ny))


def layer_activations(net, x):
    _, _, acts = net.forward(x, collect=True)
    return {l.name: a for l, a in zip(net.layers, acts)}


def cka_by_layer(net_a, net_b, x):
    """Per-layer CKA between two networks' activations on the same inputs."""
    a = layer_activations(net_a, x)
    b = layer_activations(net_b, x)
    return {name: linear_cka(a[name], b[name]) for name in a}


def gradient_norms(net, x, y, loss_scale=1.0):
    """Euclidean norm of each trainable layer's masked weight gradient on a batch."""
    _, _, grads = net.loss_and_grads(x, y)
    out = {}
    for layer in net.layers:
        if layer.name in grads:
            g = grads[layer.name][0] * loss_scale
            out[layer.name] = float(np.linalg.norm(np.where(layer.mask, g, 0).astype(np.float64)))
    return out


def norm_differences(trace):
    """``|norm(t) - norm(t-1)|`` per layer for a list of per-epoch norm dicts."""
    out = []
    for prev, cur in zip(trace, trace[1:]):
        out.append({k: abs(cur[k] - prev[k]) for k in cur if k in prev})
    return out
