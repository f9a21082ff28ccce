"""Circular data sieving over a fixed-size partial training set.

A random fraction ``p`` of the samples starts in a FIFO queue of removed
samples. Every update swaps the easiest partial-set samples (fewest
forgetting events in the last interval) for the samples at the queue head,
and appends the swapped-out samples to the queue tail.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal

import numpy as np

from .errors import ConfigError, InternalError
from .model import keep_count


@dataclass
class SieveState:
    partial_set: list
    removed_queue: deque
    p: float
    update_ratio: float = 0.30
    forget_count: dict = field(default_factory=dict)
    prev_correct: dict = field(default_factory=dict)
    initial_drain_remaining: int = 0
    shuffle: str = "each"          # "each": shuffle after every post-drain update; "once": only the first
    shuffles: int = 0
    updates: int = 0

    @property
    def size(self):
        return len(self.partial_set) + len(self.removed_queue)

    def to_dict(self):
        return {"partial_set": [int(i) for i in self.partial_set],
                "removed_queue": [int(i) for i in self.removed_queue],
                "p": self.p, "update_ratio": self.update_ratio,
                "forget_count": {str(k): v for k, v in self.forget_count.items()},
                "prev_correct": {str(k): v for k, v in self.prev_correct.items()},
                "initial_drain_remaining": self.initial_drain_remaining,
                "shuffle": self.shuffle, "shuffles": self.shuffles, "updates": self.updates}

    @classmethod
    def from_dict(cls, d):
        st = cls(list(d["partial_set"]), deque(d["removed_queue"]), d["p"], d["update_ratio"],
                 {int(k): v for k, v in d["forget_count"].items()},
                 {int(k): v for k, v in d["prev_correct"].items()},
                 d["initial_drain_remaining"], d["shuffle"], d["shuffles"], d["updates"])
        return st


def init_sieve(size, p, seed, update_ratio=0.30, shuffle="each"):
    """Move ``round(p*size)`` uniformly random samples to the removed queue."""
    if not 0 <= p < 1:
        raise ConfigError(f"removal fraction must be in [0, 1), got {p}", "data-sieve")
    if not 0 <= update_ratio <= 1:
        raise ConfigError(f"update ratio must be in [0, 1], got {update_ratio}", "data-sieve")
    if shuffle not in ("each", "once"):
        raise ConfigError(f"shuffle policy must be 'each' or 'once', got {shuffle!r}", "data-sieve")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(size)
    n_removed = size - keep_count(size, p)
    removed = perm[:n_removed]
    partial = np.sort(perm[n_removed:])
    return SieveState(
        partial_set=[int(i) for i in partial],
        removed_queue=deque(int(i) for i in removed),
        p=p, update_ratio=update_ratio,
        forget_count={int(i): 0 for i in partial},
        initial_drain_remaining=n_removed, shuffle=shuffle)


def record_epoch(state, correctness):
    """Count correct-to-incorrect transitions for this epoch's predictions.

    ``correctness`` maps sample index to bool and must cover the partial set.
    """
    members = state.forget_count
    if len(correctness) != len(members):
        missing = set(members) - set(correctness)
        extra = set(correctness) - set(members)
        raise InternalError(f"correctness covers the wrong samples (missing {len(missing)}, "
                            f"unknown {sorted(extra)[:5]})", "data-sieve")
    prev = state.prev_correct
    for i, ok in correctness.items():
        if i not in members:
            raise InternalError(f"unknown sample index {i}", "data-sieve")
        ok = bool(ok)
        if prev.get(i) is True and not ok:
            members[i] += 1
        prev[i] = ok


def swap_count(state):
    """``round(update_ratio * |queue|)``, halves rounded up."""
    ratio = Decimal(repr(round(float(state.update_ratio), 12)))
    return int((ratio * len(state.removed_queue) + Decimal("0.5")).to_integral_value(rounding=ROUND_FLOOR))


def sieve_update(state, rng):
    """Swap the ``round(update_ratio*|queue|)`` easiest samples with the queue head.

    Easiest means fewest forgetting events, ties broken by lower sample index.
    Returns a report dict.
    """
    u = swap_count(state)
    if u > len(state.partial_set):
        raise ConfigError(f"cannot swap {u} samples out of a partial set of {len(state.partial_set)}",
                          "data-sieve")
    counts = np.array([state.forget_count[i] for i in state.partial_set], dtype=np.int64)
    report = {"count": u, "forget_min": int(counts.min()) if counts.size else 0,
              "forget_median": float(np.median(counts)) if counts.size else 0.0,
              "forget_max": int(counts.max()) if counts.size else 0}
    order = sorted(state.partial_set, key=lambda i: (state.forget_count[i], i))
    out = order[:u]
    incoming = [state.removed_queue.popleft() for _ in range(u)]
    out_set = set(out)
    state.partial_set = [i for i in state.partial_set if i not in out_set] + incoming
    state.removed_queue.extend(out)
    state.initial_drain_remaining = max(0, state.initial_drain_remaining - u)
    state.forget_count = {i: 0 for i in state.partial_set}
    state.prev_correct = {}
    state.updates += 1
    shuffled = False
    if state.initial_drain_remaining == 0 and u and (state.shuffle == "each" or state.shuffles == 0):
        q = list(state.removed_queue)
        rng.shuffle(q)
        state.removed_queue = deque(q)
        state.shuffles += 1
        shuffled = True
    report.update(drain_remaining=state.initial_drain_remaining, shuffled=shuffled)
    return report
