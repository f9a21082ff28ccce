"""FLOPs and memory accounting.

Conventions: a multiply-accumulate is 2 FLOPs; a layer's forward cost is
``2 * nnz * positions`` per sample (``positions`` = output pixels for conv,
1 for affine); its backward cost is twice that (input gradients plus weight
gradients) while trainable and 0 while frozen or paused. Bias, activation,
loss and mask bookkeeping are not counted. Frozen blocks still pay forward.

Two routes compute the same numbers: the *measured* route reads the live
network (``epoch_flops``), the *planning* route (``NetworkCostModel``)
simulates mask sizes epoch by epoch from the DST schedule and a block
activity matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .model import keep_count

ACTIVE, PAUSED, FROZEN = 0, 1, 2
BYTES_PER_VALUE = 4


def layer_fwd_flops(layer, sparsity=None, batch=1):
    """Forward FLOPs of ``layer`` for ``batch`` samples.

    With ``sparsity`` None the live mask count is used, otherwise the count a
    layer of this size keeps at that sparsity.
    """
    nnz = layer.nnz if sparsity is None else keep_count(layer.size, sparsity)
    return 2 * nnz * layer.positions * batch


def layer_bwd_flops(layer, sparsity=None, batch=1, active=None):
    if active is None:
        active = layer.trainable
    return 2 * layer_fwd_flops(layer, sparsity, batch) if active else 0


def epoch_flops(net, samples):
    """Training FLOPs of one epoch over ``samples`` examples in the network's current state."""
    per_sample = sum(layer_fwd_flops(l) + layer_bwd_flops(l) for l in net.layers)
    return per_sample * samples


def flops_breakdown(net, samples, dataset_size):
    """Counterfactual epoch costs used to attribute savings to each source.

    ``dense``: dense weights, nothing frozen, full dataset. ``sparse``: live
    masks, nothing frozen, full dataset. ``frozen``: live masks and freeze
    state, full dataset. ``actual``: as ``frozen`` but over ``samples``.
    Sparsity, freezing and sieving savings telescope:
    ``dense - sparse``, ``sparse - frozen``, ``frozen - actual``.
    """
    dense = sum(3 * 2 * l.size * l.positions for l in net.layers) * dataset_size
    sparse = sum(3 * layer_fwd_flops(l) for l in net.layers) * dataset_size
    per_sample = sum(layer_fwd_flops(l) + layer_bwd_flops(l) for l in net.layers)
    return {"dense": dense, "sparse": sparse, "frozen": per_sample * dataset_size,
            "actual": per_sample * samples}


# ---------------------------------------------------------------------------
# plan-time cost models; both take a block activity matrix codes[epoch, block]


class BlockCostTable:
    """Fixed per-epoch forward/backward FLOPs per block."""

    def __init__(self, bwd, fwd=None, layer_counts=None):
        self.bwd = np.asarray(bwd, dtype=float)
        self.fwd = np.zeros_like(self.bwd) if fwd is None else np.asarray(fwd, dtype=float)
        self.layer_counts = list(layer_counts or [1] * len(self.bwd))

    @property
    def n_blocks(self):
        return len(self.bwd)

    def epoch_series(self, codes):
        codes = np.asarray(codes)
        return (self.fwd[None, :] + self.bwd[None, :] * (codes == ACTIVE)).sum(axis=1)

    def total_flops(self, codes):
        return float(self.epoch_series(codes).sum())

    def block_bwd_flops(self, block, epoch=0):
        return float(self.bwd[block])


class NetworkCostModel:
    """Simulated training cost of a network under a DST schedule.

    Mirrors the engine: masked layers start at their target sparsity, each
    structure update leaves searching layers at ``s - delta`` (``s`` after
    ``search_end``), and a block is pruned to ``s`` when it freezes.
    """

    def __init__(self, net, samples, schedule=None):
        self.samples = samples
        self.schedule = schedule
        self.layer_counts = [len(b.layers) for b in net.blocks]
        self._block_of = np.array([b.index for b in net.blocks for _ in b.layers])
        self._unit = np.array([2.0 * l.positions * samples for l in net.layers])
        self._layers = [(l.size, l.sparsity, l.dense) for l in net.layers]
        self._cache = {}

    @property
    def n_blocks(self):
        return len(self.layer_counts)

    def _staircase(self, n_epochs):
        """nnz[epoch, layer] for a layer that is never frozen."""
        if n_epochs in self._cache:
            return self._cache[n_epochs]
        nnz = np.empty((n_epochs, len(self._layers)))
        sched = self.schedule
        for j, (size, s, dense) in enumerate(self._layers):
            final = keep_count(size, s)
            col = np.full(n_epochs, float(final))
            if sched is not None and not dense:
                for e in range(0, min(n_epochs, sched.search_end), sched.interval):
                    d = sched.delta(e)
                    if d is not None:
                        col[e:min(e + sched.interval, sched.search_end, n_epochs)] = keep_count(size, s - d)
            nnz[:, j] = col
        self._cache[n_epochs] = nnz
        return nnz

    def nnz_matrix(self, codes):
        codes = np.asarray(codes)
        n_epochs = codes.shape[0]
        nnz = self._staircase(n_epochs).copy()
        interval = self.schedule.interval if self.schedule else 1
        for j, (size, s, dense) in enumerate(self._layers):
            if dense:
                continue
            frozen = codes[:, self._block_of[j]] == FROZEN
            if not frozen.any():
                continue
            final = keep_count(size, s)
            nnz[frozen, j] = final
            # after a resume the layer stays at s until the next structure update
            ends = np.flatnonzero(frozen[:-1] & ~frozen[1:]) + 1
            for r in ends:
                nxt = -(-r // interval) * interval
                nnz[r:nxt, j] = final
        return nnz

    def epoch_series(self, codes):
        codes = np.asarray(codes)
        fwd = self.nnz_matrix(codes) * self._unit[None, :]
        active = codes[:, self._block_of] == ACTIVE
        return (fwd * (1 + 2 * active)).sum(axis=1)

    def total_flops(self, codes):
        return float(self.epoch_series(codes).sum())

    def block_bwd_flops(self, block, epoch=0):
        """Per-epoch backward FLOPs of ``block`` if it were trainable at ``epoch``."""
        nnz = self._staircase(epoch + 1)[epoch]
        cols = self._block_of == block
        return float(2 * (nnz[cols] * self._unit[cols]).sum())


# ---------------------------------------------------------------------------
# memory


@dataclass
class MemoryReport:
    weights: int = 0
    activations: int = 0
    weight_grads: int = 0
    activation_grads: int = 0
    optimizer: int = 0
    index_overhead: int = 0

    @property
    def total(self):
        return self.weights + self.activations + self.weight_grads + self.activation_grads + self.optimizer

    def as_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["total"] = self.total
        return d


def _consumed(layer):
    """Per-sample size of the activation a layer reads."""
    return layer.weights.shape[0] if layer.kind == "affine" else int(np.prod(layer.in_shape))


def memory_snapshot(net, batch, inactive_prefix=None, sparsity=None):
    """Training memory in bytes at 32-bit values.

    Weights count values only (``index_overhead`` reports 4-byte indices
    separately). The inactive prefix keeps its weights; it needs no
    gradients, no optimizer state and only the boundary activation feeding
    the first trainable layer. ``inactive_prefix`` defaults to the live
    frozen prefix; ``sparsity`` switches from live masks to nominal counts.
    """
    k = net.frozen_prefix() if inactive_prefix is None else inactive_prefix
    first_active = sum(len(b.layers) for b in net.blocks[:k])
    nnz = [l.nnz if sparsity is None else keep_count(l.size, l.sparsity if l.dense else sparsity)
           for l in net.layers]
    active = range(first_active, len(net.layers))
    out_sizes = [int(np.prod(l.out_shape)) for l in net.layers]
    rep = MemoryReport()
    rep.weights = BYTES_PER_VALUE * sum(nnz)
    rep.index_overhead = 4 * sum(n for n, l in zip(nnz, net.layers) if not l.dense)
    if first_active < len(net.layers):
        boundary = _consumed(net.layers[first_active])
        rep.activations = BYTES_PER_VALUE * batch * (boundary + sum(out_sizes[i] for i in active))
        rep.activation_grads = BYTES_PER_VALUE * batch * sum(out_sizes[i] for i in active)
        rep.weight_grads = BYTES_PER_VALUE * sum(nnz[i] for i in active)
        rep.optimizer = BYTES_PER_VALUE * sum(nnz[i] for i in active)
    return rep


@dataclass
class RunMemory:
    baseline_bytes: int
    min_bytes: int
    avg_bytes: float
    per_epoch: list


def memory_over_run(net, plan, batch, sparsity=None):
    """Min/avg training memory over a plan's epochs versus the never-frozen baseline."""
    sparsity = net.sparsity if sparsity is None else sparsity
    codes = plan.activity_matrix()
    per_epoch = []
    for row in codes:
        k = 0
        while k < len(row) and row[k] != ACTIVE:
            k += 1
        per_epoch.append(memory_snapshot(net, batch, k, sparsity).total)
    base = memory_snapshot(net, batch, 0, sparsity).total
    return RunMemory(base, min(per_epoch), float(np.mean(per_epoch)), per_epoch)
