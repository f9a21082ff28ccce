"""Training loop, budget planning and metrics reporting."""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import cost as C
from .checkpoint import TrainState, save_checkpoint
from .data import batches, load_cifar10_binary, load_idx, synth_split
from .dst import structure_update
from .errors import FormatError, InternalError
from .freeze import _codes, block_lr, freeze_step, generate_freeze_config, plan_for_target
from .kernels import sgd_momentum_masked
from .model import init_random_sparse, keep_count, parse_arch
from .sieve import init_sieve, record_epoch, sieve_update
from .tensor import dtype_for


# ---------------------------------------------------------------------------
# optimizer


class MaskedSGD:
    """Momentum SGD with decoupled weight decay on active masked weights.

    ``momentum`` maps layer name to ``(weight_buf, bias_buf)`` or None
    (released, e.g. for frozen layers); buffers are created lazily.
    Biases get momentum but no decay.
    """

    def __init__(self, momentum=0.9, weight_decay=1e-4, state=None):
        self.m = momentum
        self.wd = weight_decay
        self.state = {} if state is None else state

    def weight_buffers(self):
        return {k: v[0] for k, v in self.state.items() if v is not None}

    def step(self, net, grads, lr_of):
        for layer in net.layers:
            if layer.name not in grads:
                continue
            gw, gb = grads[layer.name]
            bufs = self.state.get(layer.name)
            if bufs is None:
                bufs = (np.zeros_like(layer.weights), np.zeros_like(layer.bias))
                self.state[layer.name] = bufs
            lr = lr_of[layer.name]
            sgd_momentum_masked(layer.weights, gw, bufs[0], layer.mask, lr, self.m, self.wd)
            bb = bufs[1]
            bb *= bb.dtype.type(self.m)
            bb += gb
            layer.bias -= bb.dtype.type(lr) * bb


# ---------------------------------------------------------------------------
# setup


def load_data(cfg):
    """Return ``(train, test)`` datasets per the config, normalized with train statistics."""
    ds = cfg.dataset
    if ds.kind == "idx":
        train = load_idx(ds.train_images, ds.train_labels, ds.classes)
        test = load_idx(ds.test_images, ds.test_labels, ds.classes)
    elif ds.kind == "cifar10":
        train = load_cifar10_binary([p.strip() for p in ds.train_files.split(",") if p.strip()])
        test = load_cifar10_binary([p.strip() for p in ds.test_files.split(",") if p.strip()])
    else:
        shape = tuple(int(v) for v in ds.shape.split("x")) if ds.shape else None
        train, test = synth_split(ds.n_train, ds.n_test, ds.classes, ds.dim, ds.seed,
                                  spread=ds.spread, noise=ds.noise, shape=shape)
    if ds.limit_train:
        train = train.subset(np.arange(min(ds.limit_train, len(train))))
    if ds.normalize:
        train = train.normalize()
        test = test.normalize(train.mean, train.std)
    return train, test


def make_network(cfg):
    dtype = dtype_for(cfg.model.precision)
    return init_random_sparse(parse_arch(cfg.model.arch), cfg.sparsity.s, cfg.train.seed, dtype,
                              cfg.model.first_layer_dense, cfg.block_sizes())


def partial_size(cfg, n):
    return keep_count(n, cfg.sieve.p)


def make_plan(cfg, net, samples):
    """Freeze plan for the config, or None when freezing is off.

    With a target, ``T_frz`` is solved unless given. With only ``t_frz``,
    every block but the last freezes on the grid from ``t_frz``.
    """
    f = cfg.freeze
    if f.target <= 0 and not f.t_frz:
        return None
    model = C.NetworkCostModel(net, samples, cfg.schedule())
    T, interval = cfg.train.epochs, cfg.dst.interval
    if f.target > 0:
        return plan_for_target(model, f.target, T, interval, f.scheme, f.frozen_layer_fraction,
                               f.t_frz or None)
    n = model.n_blocks
    everything = {i: f.t_frz + interval * i for i in range(n - 1) if f.t_frz + interval * i < T}
    floor = model.total_flops(_codes(T, n, everything))
    return generate_freeze_config(model, floor, T, f.t_frz, interval, f.scheme)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    net: object
    metrics: list
    plan: object
    summary: dict
    out_dir: str
    sieve: object = None
    timings: list = field(default_factory=list)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def run_train(cfg, out_dir=None, data=None, log=None):
    """Train per the config; write ``metrics.jsonl``, checkpoints and ``summary.json``.

    ``data`` optionally supplies ``(train, test)`` to skip loading. ``log``
    is an optional callable receiving each epoch record.
    """
    out_dir = out_dir or cfg.output.dir
    os.makedirs(out_dir, exist_ok=True)
    train, test = data if data is not None else load_data(cfg)
    seed = cfg.train.seed
    T, interval = cfg.train.epochs, cfg.dst.interval
    schedule = cfg.schedule()
    net = make_network(cfg)

    sieve = init_sieve(len(train), cfg.sieve.p, seed + 7919, cfg.sieve.update_ratio, cfg.sieve.shuffle)
    plan = make_plan(cfg, net, len(sieve.partial_set))
    opt = MaskedSGD(cfg.optimizer.momentum, cfg.optimizer.weight_decay)
    dst_rng = np.random.default_rng([seed, 1])
    sieve_rng = np.random.default_rng([seed, 2])
    block_index = {l.name: b.index for b in net.blocks for l in b.layers}
    augment = cfg.dataset.augment and train.images.ndim == 4

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    metrics, timings = [], []
    cum = 0.0
    with open(metrics_path, "w", encoding="utf-8") as mlog:
        for epoch in range(T):
            t0 = time.perf_counter()
            newly = freeze_step(net, epoch, plan, opt.state) if plan is not None else []
            touched = []
            swap = None
            if schedule.is_update_epoch(epoch):
                touched = structure_update(net, epoch, schedule, dst_rng, opt.weight_buffers())
            sieve_on = epoch < schedule.search_end or not cfg.sieve.stop_with_search
            if sieve.removed_queue and epoch > 0 and epoch % interval == 0 and sieve_on:
                swap = sieve_update(sieve, sieve_rng)
                swap["epoch"] = epoch

            lrs = []
            for b in net.blocks:
                lr = block_lr(epoch, b.index, plan, cfg.optimizer.lr0, cfg.optimizer.lr_end, T)
                if cfg.train.warmup_epochs and epoch < cfg.train.warmup_epochs:
                    lr *= (epoch + 1) / cfg.train.warmup_epochs
                lrs.append(lr)
            lr_of = {name: lrs[b] for name, b in block_index.items()}

            # measured cost of this epoch, in the state the batches will see
            samples = len(sieve.partial_set)
            ep_flops = C.epoch_flops(net, samples)
            breakdown = C.flops_breakdown(net, samples, len(train))
            mem = C.memory_snapshot(net, cfg.output.memory_batch)

            loss_sum, correct_n, seen = 0.0, 0, 0
            correctness = {}
            for x, y, idx in batches(train, sieve.partial_set, cfg.train.batch_size, (seed, epoch), augment):
                loss, logits, grads = net.loss_and_grads(x, y)
                ok = logits.argmax(axis=1) == y
                correctness.update(zip(idx.tolist(), ok.tolist()))
                loss_sum += loss * len(y)
                correct_n += int(ok.sum())
                seen += len(y)
                opt.step(net, grads, lr_of)
            if seen != samples:
                raise InternalError(f"epoch {epoch} saw {seen} samples, partial set has {samples}", "cli-runner")
            record_epoch(sieve, correctness)
            eval_acc = float(np.mean(net.predict(test.images, cfg.train.eval_batch) == test.labels)) \
                if len(test) else 0.0
            cum += ep_flops
            rec = {
                "epoch": epoch,
                "train_loss": loss_sum / max(seen, 1),
                "train_acc": correct_n / max(seen, 1),
                "eval_acc": eval_acc,
                "lr_per_block": lrs,
                "epoch_flops": ep_flops,
                "cum_flops": cum,
                "mem_bytes": mem.total,
                "frozen_blocks": [b.index for b in net.blocks if b.frozen],
                "paused_blocks": [b.index for b in net.blocks if not b.frozen and not b.active],
                "newly_frozen": newly,
                "structure_update": bool(touched),
                "sieve_swaps": swap["count"] if swap else 0,
                "sieve": swap,
                "samples": samples,
                "layer_sparsity": {l.name: l.current_sparsity for l in net.layers},
                "layer_nnz": {l.name: l.nnz for l in net.layers},
                "flops_dense": breakdown["dense"],
                "flops_sparse": breakdown["sparse"],
                "flops_frozen": breakdown["frozen"],
                "flops_actual": breakdown["actual"],
            }
            mlog.write(json.dumps(rec, default=_json_default, sort_keys=True) + "\n")
            mlog.flush()
            metrics.append(rec)
            timings.append(time.perf_counter() - t0)
            if log is not None:
                log(rec)
            every = cfg.output.checkpoint_every
            if every and (epoch + 1) % every == 0 and epoch + 1 < T:
                _save(net, opt, sieve, epoch + 1, seed, os.path.join(out_dir, f"epoch{epoch + 1:04d}.spfd"))

    _save(net, opt, sieve, T, seed, os.path.join(out_dir, "final.spfd"))
    summary = summarize(metrics)
    if plan is not None:
        summary["plan"] = plan_report(plan)
        rm = C.memory_over_run(net, plan, cfg.output.memory_batch, cfg.sparsity.s)
        summary["memory_plan"] = {"baseline_bytes": rm.baseline_bytes, "min_bytes": rm.min_bytes,
                                  "avg_bytes": rm.avg_bytes}
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_json_default)
    with open(os.path.join(out_dir, "timing.json"), "w", encoding="utf-8") as f:
        json.dump({"epoch_seconds": timings}, f)
    return RunResult(net, metrics, plan, summary, out_dir, sieve, timings)


def _save(net, opt, sieve, epoch, seed, path):
    state = TrainState(epoch=epoch, seed=seed, momentum=opt.state,
                       extra={"sieve": sieve.to_dict()})
    save_checkpoint(net, state, path)


# ---------------------------------------------------------------------------
# budget and report


def plan_report(plan):
    return {
        "scheme": plan.scheme, "T": plan.T, "t_frz": plan.t_frz, "interval": plan.interval,
        "resume_epoch": plan.resume_epoch,
        "baseline_flops": plan.baseline_flops,
        "predicted_total_flops": plan.predicted_total_flops,
        "predicted_reduction": plan.predicted_reduction,
        "block_periods": {str(k): v for k, v in plan.block_periods.items()},
        "rows": [{"block": b, "freeze_epoch": e, "bp_flops": bp, "saved_flops": s, "cumulative_flops": c}
                 for b, e, bp, s, c in plan.rows()],
    }


def run_budget(cfg):
    """Plan freezing for the config without training; returns a report dict."""
    net = make_network(cfg)
    n = cfg.dataset.n_train if cfg.dataset.kind == "synthetic" else None
    if n is None:
        train, _ = load_data(cfg)
        n = len(train)
    elif cfg.dataset.limit_train:
        n = min(n, cfg.dataset.limit_train)
    samples = partial_size(cfg, n)
    plan = make_plan(cfg, net, samples)
    if plan is None:
        model = C.NetworkCostModel(net, samples, cfg.schedule())
        plan = generate_freeze_config(model, float("inf"), cfg.train.epochs, cfg.train.epochs,
                                      cfg.dst.interval, "single_shot")
    report = plan_report(plan)
    report["samples_per_epoch"] = samples
    mem = C.memory_over_run(net, plan, cfg.output.memory_batch, cfg.sparsity.s)
    report["memory"] = {"baseline_bytes": mem.baseline_bytes, "min_bytes": mem.min_bytes,
                        "avg_bytes": mem.avg_bytes}
    return report


def format_budget(report):
    lines = [f"scheme {report['scheme']}  T={report['T']}  T_frz={report['t_frz']}  "
             f"interval={report['interval']}",
             f"baseline training FLOPs   {report['baseline_flops']:.6e}",
             f"predicted training FLOPs  {report['predicted_total_flops']:.6e}  "
             f"(reduction {report['predicted_reduction']:.2%})"]
    if report.get("resume_epoch") is not None:
        lines.append(f"all blocks resume at epoch {report['resume_epoch']}")
    if report["block_periods"]:
        lines.append("block update periods: " +
                     ", ".join(f"{b}:1/{p}" for b, p in report["block_periods"].items()))
    lines.append(f"{'block':>5} {'epoch':>6} {'bp_flops':>14} {'saved':>14} {'cumulative':>14}")
    for r in report["rows"]:
        ep = "-" if r["freeze_epoch"] is None else str(r["freeze_epoch"])
        lines.append(f"{r['block']:>5} {ep:>6} {r['bp_flops']:>14.6e} {r['saved_flops']:>14.6e} "
                     f"{r['cumulative_flops']:>14.6e}")
    if "memory" in report:
        m = report["memory"]
        lines.append(f"memory bytes: baseline {m['baseline_bytes']}  min {m['min_bytes']}  "
                     f"avg {m['avg_bytes']:.1f}")
    return "\n".join(lines)


def budget_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "freeze_epoch", "bp_flops", "saved_flops", "cumulative_flops"])
    for r in report["rows"]:
        w.writerow([r["block"], r["freeze_epoch"], r["bp_flops"], r["saved_flops"], r["cumulative_flops"]])
    return buf.getvalue()


def read_metrics(path):
    records = []
    try:
        f = open(path, encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read metrics {path}: {exc.strerror}", "cli-runner") from None
    with f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or "epoch" not in rec:
                    raise ValueError("record without an epoch field")
            except ValueError as exc:
                raise FormatError(f"{path}:{n}: malformed metrics line ({exc})", "cli-runner") from None
            records.append(rec)
    return records


def summarize(records):
    """Final accuracy, cumulative FLOPs with per-source savings, and memory range."""
    if not records:
        return {"epochs": 0, "final_eval_acc": 0.0, "final_train_acc": 0.0, "cum_flops": 0.0,
                "dense_flops": 0.0, "savings": {"sparsity": 0.0, "freezing": 0.0, "sieving": 0.0, "total": 0.0},
                "min_mem_bytes": 0, "avg_mem_bytes": 0.0, "max_mem_bytes": 0}
    tot = {k: float(sum(r.get(f"flops_{k}", 0.0) for r in records))
           for k in ("dense", "sparse", "frozen", "actual")}
    mem = [r.get("mem_bytes", 0) for r in records]
    return {
        "epochs": len(records),
        "final_eval_acc": records[-1].get("eval_acc", 0.0),
        "final_train_acc": records[-1].get("train_acc", 0.0),
        "cum_flops": float(records[-1].get("cum_flops", 0.0)),
        "dense_flops": tot["dense"],
        "savings": {"sparsity": tot["dense"] - tot["sparse"],
                    "freezing": tot["sparse"] - tot["frozen"],
                    "sieving": tot["frozen"] - tot["actual"],
                    "total": tot["dense"] - tot["actual"]},
        "min_mem_bytes": int(min(mem)), "avg_mem_bytes": float(np.mean(mem)), "max_mem_bytes": int(max(mem)),
    }


CSV_FIELDS = ("epoch", "train_loss", "train_acc", "eval_acc", "epoch_flops", "cum_flops", "mem_bytes",
              "frozen_blocks", "sieve_swaps")


def metrics_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([len(r.get(k, [])) if k == "frozen_blocks" else r.get(k, "") for k in CSV_FIELDS])
    return buf.getvalue()


def run_report(metrics_path):
    """Return ``(summary dict, per-epoch CSV text)`` for a metrics log."""
    records = read_metrics(metrics_path)
    return summarize(records), metrics_csv(records)
