"""Progressive layer freezing: plan generation, freeze events and per-block LR.

Blocks freeze front to back, one per interval starting at ``t_frz``, until
the predicted training FLOPs meet the target. The last block always trains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .cost import ACTIVE, FROZEN, PAUSED
from .dst import prune_to
from .errors import ConfigError, PlanningError

SCHEMES = ("single_shot", "single_shot_resume", "periodic", "delayed_periodic")
FRONT_PERIOD, MIDDLE_PERIOD = 4, 2


@dataclass
class FreezePlan:
    scheme: str
    T: int
    t_frz: int
    interval: int
    n_blocks: int
    block_freeze_epochs: dict = field(default_factory=dict)   # single-shot family: block -> epoch
    block_periods: dict = field(default_factory=dict)         # periodic family: block -> period
    periodic_start: int = 0
    resume_epoch: int | None = None
    baseline_flops: float = 0.0
    predicted_total_flops: float = 0.0
    predicted_saved_flops: dict = field(default_factory=dict)
    block_bwd_flops: dict = field(default_factory=dict)

    # -- activity ----------------------------------------------------------

    def state(self, block, epoch):
        f = self.block_freeze_epochs.get(block)
        if f is not None and f <= epoch and (self.resume_epoch is None or epoch < self.resume_epoch):
            return FROZEN
        p = self.block_periods.get(block)
        if p is not None and epoch >= self.periodic_start and (epoch - self.periodic_start) % p:
            return PAUSED
        return ACTIVE

    def activity_matrix(self):
        return _codes(self.T, self.n_blocks, self.block_freeze_epochs, self.resume_epoch,
                      self.block_periods, self.periodic_start)

    def frequency(self, block):
        return Fraction(1, self.block_periods.get(block, 1))

    def active_epochs(self, block):
        """Total epochs in which ``block`` trains (its cosine horizon)."""
        return int((self.activity_matrix()[:, block] == ACTIVE).sum())

    def active_epochs_before(self, block, epoch):
        return int((self.activity_matrix()[:epoch, block] == ACTIVE).sum())

    @property
    def predicted_reduction(self):
        if not self.baseline_flops:
            return 0.0
        return 1.0 - self.predicted_total_flops / self.baseline_flops

    def rows(self):
        """Per frozen block: (index, freeze epoch, BpFlops/epoch, saved, cumulative predicted total)."""
        out = []
        total = self.baseline_flops
        for b in sorted(self.predicted_saved_flops):
            total -= self.predicted_saved_flops[b]
            out.append((b, self.block_freeze_epochs.get(b), self.block_bwd_flops.get(b, 0.0),
                        self.predicted_saved_flops[b], total))
        return out


def _codes(T, n_blocks, freeze_epochs=None, resume=None, periods=None, start=0):
    codes = np.zeros((T, n_blocks), dtype=np.int8)
    for b, p in (periods or {}).items():
        e = np.arange(start, T)
        codes[start:, b] = np.where((e - start) % p, PAUSED, ACTIVE)
    for b, f in (freeze_epochs or {}).items():
        codes[f:T if resume is None else resume, b] = FROZEN
    return codes


def _check(scheme, T, t_frz, interval):
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown freezing scheme {scheme!r}; expected one of {SCHEMES}", "freeze-scheduler")
    if interval <= 0 or T <= 0:
        raise ConfigError("T and the interval must be positive", "freeze-scheduler")
    if scheme != "periodic" and not 0 < t_frz <= T:
        raise ConfigError(f"freeze start epoch must satisfy 0 < T_frz <= T, got {t_frz}", "freeze-scheduler")


def generate_freeze_config(cost, target_flops, T, t_frz, interval, scheme="single_shot"):
    """Build a freeze plan whose predicted training FLOPs do not exceed ``target_flops``.

    ``cost`` is a cost model (``BlockCostTable`` or ``NetworkCostModel``).
    Single-shot: walk the blocks front to back; while the prediction is above
    target, freeze block ``i`` at ``t_frz + interval*i`` and subtract what
    that saves. The last block is never frozen.
    """
    _check(scheme, T, t_frz, interval)
    n = cost.n_blocks
    baseline = cost.total_flops(_codes(T, n))
    plan = FreezePlan(scheme, T, t_frz, interval, n, baseline_flops=baseline, predicted_total_flops=baseline)
    if scheme in ("periodic", "delayed_periodic"):
        return _periodic_plan(plan, cost, target_flops)

    train = baseline
    epochs = {}
    for i in range(n - 1):
        if train <= target_flops:
            break
        e = t_frz + interval * i
        if e >= T:
            break
        epochs[i] = e
        new = cost.total_flops(_codes(T, n, epochs))
        plan.predicted_saved_flops[i] = train - new
        plan.block_bwd_flops[i] = cost.block_bwd_flops(i, e)
        train = new
    if train > target_flops:
        raise PlanningError(
            f"target {target_flops:.6g} FLOPs unreachable with T_frz={t_frz}; best achievable "
            f"reduction {1 - train / baseline:.2%}", best_reduction=1 - train / baseline)
    plan.block_freeze_epochs = epochs
    plan.predicted_total_flops = train
    if scheme == "single_shot_resume" and epochs:
        _shift_for_resume(plan, cost)
    return plan


def _shift_for_resume(plan, cost):
    """Freeze every block ``t`` epochs earlier and resume all for the last ``t`` epochs."""
    k = len(plan.block_freeze_epochs)
    t = plan.interval * math.floor(k / 2 + 0.5)
    t = min(t, plan.t_frz - plan.interval if plan.t_frz > plan.interval else 0)
    if t <= 0:
        return
    plan.block_freeze_epochs = {b: e - t for b, e in plan.block_freeze_epochs.items()}
    plan.resume_epoch = plan.T - t
    _refresh(plan, cost)


def _refresh(plan, cost):
    """Recompute predicted totals and per-block savings for a fixed plan."""
    n, T = plan.n_blocks, plan.T
    prev = plan.baseline_flops
    saved = {}
    frozen, periods = {}, {}
    for b in range(n):
        if b in plan.block_freeze_epochs:
            frozen[b] = plan.block_freeze_epochs[b]
        elif b in plan.block_periods:
            periods[b] = plan.block_periods[b]
        else:
            continue
        cur = cost.total_flops(_codes(T, n, frozen, plan.resume_epoch, periods, plan.periodic_start))
        saved[b] = prev - cur
        prev = cur
    plan.predicted_saved_flops = saved
    plan.predicted_total_flops = prev


def _periodic_plan(plan, cost, target_flops):
    """Front blocks train 1 epoch in 4, middle blocks 1 in 2, the rest always.

    Group sizes are the feasible pair whose prediction is closest to (not
    above) the target.
    """
    n, T = plan.n_blocks, plan.T
    plan.periodic_start = 0 if plan.scheme == "periodic" else plan.t_frz
    best = None
    for k_front in range(n):
        for k_mid in range(n - k_front):
            if k_front + k_mid > n - 1 or k_front + k_mid == 0:
                continue
            periods = {b: FRONT_PERIOD for b in range(k_front)}
            periods.update({b: MIDDLE_PERIOD for b in range(k_front, k_front + k_mid)})
            total = cost.total_flops(_codes(T, n, periods=periods, start=plan.periodic_start))
            if total <= target_flops and (best is None or total > best[0]):
                best = (total, periods)
    if plan.baseline_flops <= target_flops:
        return plan
    if best is None:
        raise PlanningError(f"target {target_flops:.6g} FLOPs unreachable with the {plan.scheme} scheme")
    plan.block_periods = best[1]
    for b in best[1]:
        plan.block_bwd_flops[b] = cost.block_bwd_flops(b, plan.periodic_start)
    _refresh(plan, cost)
    return plan


def prefix_blocks(layer_counts, frozen_layer_fraction):
    """Largest block prefix holding at most ``frozen_layer_fraction`` of the layers (never the last block)."""
    limit = math.floor(Fraction(frozen_layer_fraction).limit_denominator(1000) * sum(layer_counts))
    k, acc = 0, 0
    for c in layer_counts[:-1]:
        if acc + c > limit:
            break
        acc += c
        k += 1
    return max(k, 1)


def solve_start_epoch(cost, target_reduction, T, interval, frozen_layer_fraction=2 / 3):
    """Latest ``T_frz`` on the interval grid whose fixed prefix saves ``target_reduction``.

    The prefix covers about ``frozen_layer_fraction`` of the layers (rounded
    down to a block boundary); block ``i`` freezes at ``T_frz + interval*i``.
    Returns ``T`` (never freeze) for a non-positive target.
    """
    if target_reduction <= 0:
        return T
    n = cost.n_blocks
    k = prefix_blocks(cost.layer_counts, frozen_layer_fraction)
    baseline = cost.total_flops(_codes(T, n))
    best = 0.0
    for t in range((T - 1) // interval * interval, 0, -interval):
        epochs = {i: t + interval * i for i in range(k) if t + interval * i < T}
        saved = baseline - cost.total_flops(_codes(T, n, epochs))
        best = max(best, saved)
        if saved >= target_reduction * baseline:
            return t
    raise PlanningError(f"target reduction {target_reduction:.2%} unreachable; best achievable "
                        f"{best / baseline:.2%}", best_reduction=best / baseline)


def plan_for_target(cost, target_reduction, T, interval, scheme="single_shot",
                    frozen_layer_fraction=2 / 3, t_frz=None):
    """Solve ``T_frz`` (unless given) and generate the plan for a fractional FLOPs target."""
    n = cost.n_blocks
    baseline = cost.total_flops(_codes(T, n))
    target = (1 - target_reduction) * baseline
    if t_frz is None:
        t_frz = solve_start_epoch(cost, target_reduction, T, interval, frozen_layer_fraction)
    return generate_freeze_config(cost, target, T, t_frz, interval, scheme)


# ---------------------------------------------------------------------------
# training-time operations


def freeze_step(net, epoch, plan, momentum=None):
    """Apply the plan's block states at ``epoch``; return newly frozen block indices.

    A block entering the frozen state is first pruned to its target sparsity
    so its final structure is exact, then frozen; its momentum buffers are
    released. Blocks leaving the frozen state (resume) become trainable.
    """
    newly = []
    for block in net.blocks:
        st = plan.state(block.index, epoch)
        if st == FROZEN and not block.frozen:
            for layer in block.layers:
                if not layer.dense:
                    prune_to(layer, layer.sparsity, momentum[layer.name][0] if momentum and momentum.get(layer.name) else None)
                layer.frozen = True
                layer.paused = False
                if momentum is not None:
                    momentum[layer.name] = None
            block.freeze_epoch = epoch
            newly.append(block.index)
        elif st != FROZEN and block.frozen:
            for layer in block.layers:
                layer.frozen = False
        for layer in block.layers:
            layer.paused = st == PAUSED
    return newly


def cosine_lr(t_active, horizon, lr0, lr_end):
    if horizon <= 0:
        return lr_end
    t = min(t_active, horizon)
    return lr_end + 0.5 * (lr0 - lr_end) * (1 + math.cos(math.pi * t / horizon))


def block_lr(epoch, block, plan, lr0, lr_end, T=None):
    """Cosine rate over the block's own active epochs.

    A block that never stops training decays over all ``T`` epochs; with no
    plan every block follows that global schedule.
    """
    if plan is None:
        return cosine_lr(epoch, T, lr0, lr_end)
    return cosine_lr(plan.active_epochs_before(block, epoch), plan.active_epochs(block), lr0, lr_end)
