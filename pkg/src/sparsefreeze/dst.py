"""Dynamic sparse training: magnitude prune, random grow, and their schedule.

Each structure update trains the layer at ``s - delta`` until the next one:
prune to ``s`` by magnitude, then regrow to ``s - delta`` at random
(zero-initialized). At ``search_end`` a final prune to ``s`` fixes the
structure for the rest of training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InternalError, UsageError
from .model import keep_count


@dataclass(frozen=True)
class DstSchedule:
    phases: tuple            # ((start, end, delta), ...), contiguous from 0 to search_end
    search_end: int
    interval: int            # structure-change interval, in epochs

    def validate(self, s=None):
        if self.interval <= 0:
            raise ConfigError("structure change interval must be positive", "dst-engine")
        pos = 0
        for start, end, delta in self.phases:
            if start != pos or end <= start:
                raise ConfigError(f"DST phases must be contiguous from 0, got {self.phases}", "dst-engine")
            if s is not None and not 0 < delta < 1 - s:
                raise ConfigError(f"grow offset {delta} outside (0, {1 - s:g})", "dst-engine")
            pos = end
        if pos != self.search_end:
            raise ConfigError(f"DST phases end at {pos}, search_end is {self.search_end}", "dst-engine")
        return self

    def delta(self, epoch):
        """Grow offset in effect for an update at ``epoch``, or None outside the search."""
        for start, end, delta in self.phases:
            if start <= epoch < end:
                return delta
        return None

    def is_update_epoch(self, epoch):
        return epoch % self.interval == 0 and epoch <= self.search_end

    def target_after_update(self, s, epoch):
        """Sparsity a searching layer holds after the boundary at ``epoch`` (None: no event)."""
        if not self.is_update_epoch(epoch):
            return None
        if epoch == self.search_end:
            return s
        d = self.delta(epoch)
        return None if d is None else s - d


def cifar_schedule(interval=5):
    """0-90: grow to s-0.05; 90-120: grow to s-0.025; no search after 120."""
    return DstSchedule(((0, 90, 0.05), (90, 120, 0.025)), 120, interval)


def scaled_schedule(total_epochs, interval):
    """The CIFAR schedule scaled to ``total_epochs`` and snapped down to the interval grid."""
    snap = lambda e: max(interval, int(e * total_epochs / 160) // interval * interval)
    mid, end = snap(90), snap(120)
    if mid >= end:
        return DstSchedule(((0, end, 0.05),), end, interval)
    return DstSchedule(((0, mid, 0.05), (mid, end, 0.025)), end, interval)


def _check_trainable(layer):
    if layer.frozen:
        raise UsageError(f"structure change on frozen layer {layer.name}", "dst-engine")


def prune_to(layer, target_sparsity, momentum=None):
    """Keep the ``keep_count`` largest-magnitude active weights; mask the rest.

    Ties in magnitude keep the lower flat index. ``momentum`` (an array shaped
    like the weights) is zeroed at pruned positions.
    """
    _check_trainable(layer)
    keep = keep_count(layer.size, target_sparsity)
    flat_mask = layer.mask.reshape(-1)
    active = np.flatnonzero(flat_mask)
    if keep > active.size:
        raise UsageError(f"prune_to({target_sparsity}) below current sparsity on {layer.name}", "dst-engine")
    if keep == active.size:
        return
    mag = np.abs(layer.weights.reshape(-1)[active])
    # stable sort on -|w| keeps lower indices first among ties
    order = np.argsort(-mag, kind="stable")
    drop = active[order[keep:]]
    flat_mask[drop] = False
    layer.weights.reshape(-1)[drop] = 0
    if momentum is not None:
        momentum.reshape(-1)[drop] = 0


def grow_to(layer, target_sparsity, rng, momentum=None):
    """Activate uniformly random masked positions until ``keep_count`` are active.

    New weights (and their momentum) start at zero.
    """
    _check_trainable(layer)
    keep = keep_count(layer.size, target_sparsity)
    flat_mask = layer.mask.reshape(-1)
    nnz = int(np.count_nonzero(flat_mask))
    need = keep - nnz
    if need < 0:
        raise UsageError(f"grow_to({target_sparsity}) above current sparsity on {layer.name}", "dst-engine")
    if need == 0:
        return
    inactive = np.flatnonzero(~flat_mask)
    if need > inactive.size:
        raise InternalError(f"cannot grow {need} positions on {layer.name}", "dst-engine")
    chosen = rng.choice(inactive, size=need, replace=False)
    flat_mask[chosen] = True
    layer.weights.reshape(-1)[chosen] = 0
    if momentum is not None:
        momentum.reshape(-1)[chosen] = 0


def structure_update(net, epoch, schedule, rng, momentum=None):
    """Prune&grow every searching layer for the boundary at ``epoch``.

    Frozen layers and dense layers are skipped. ``momentum`` maps layer name
    to its weight-momentum buffer (or None). Returns the names updated.
    """
    if schedule.target_after_update(net.sparsity, epoch) is None:
        return []
    delta = schedule.delta(epoch) if epoch < schedule.search_end else None
    touched = []
    for layer in net.layers:
        if layer.frozen or layer.dense:
            continue
        buf = momentum.get(layer.name) if momentum else None
        prune_to(layer, layer.sparsity, buf)
        if delta is not None:
            grow_to(layer, layer.sparsity - delta, rng, buf)
        touched.append(layer.name)
    return touched
