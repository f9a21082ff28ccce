"""Command line entry point: ``train``, ``budget``, ``analyze`` and ``report``."""
from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from .errors import ConfigError, InternalError, SparseFreezeError

EXIT_OK = 0


def _overrides(pairs):
    """Parse ``section.key=value`` overrides."""
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value", "config")
        out.setdefault(sec.strip(), {})[name.strip()] = value.strip()
    return out


def _config(args):
    from .config import load_config
    return load_config(args.config, _overrides(args.set))


def cmd_train(args):
    from .train import run_train
    cfg = _config(args)
    out = args.out or cfg.output.dir

    def log(rec):
        if not args.quiet:
            print(f"epoch {rec['epoch']:4d}  loss {rec['train_loss']:.4f}  train {rec['train_acc']:.4f}  "
                  f"eval {rec['eval_acc']:.4f}  frozen {len(rec['frozen_blocks'])}  "
                  f"flops {rec['epoch_flops']:.3e}", flush=True)

    res = run_train(cfg, out, log=log)
    s = res.summary
    print(f"final eval accuracy {s['final_eval_acc']:.4f}; training FLOPs {s['cum_flops']:.6e}; "
          f"outputs in {out}")
    return EXIT_OK


def cmd_budget(args):
    from .train import budget_csv, format_budget, run_budget
    report = run_budget(_config(args))
    print(format_budget(report))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(budget_csv(report))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
    return EXIT_OK


def _checkpoints(trace):
    if os.path.isfile(trace):
        return [trace]
    paths = sorted(glob.glob(os.path.join(trace, "*.spfd")))
    if not paths:
        raise ConfigError(f"no checkpoints (*.spfd) under {trace}", "analysis")
    return paths


def _eval_batch(args, net, size=512):
    """Fixed, seeded batch of held-out samples shared by every checkpoint in a trace."""
    from .train import load_data
    if not args.config:
        raise ConfigError("cka and gradnorm need --config to locate the evaluation data", "analysis")
    _, test = load_data(_config(args))
    rng = np.random.default_rng(args.seed)
    idx = np.sort(rng.choice(len(test), size=min(size, len(test)), replace=False))
    return test.images[idx], test.labels[idx]


def cmd_analyze(args):
    from . import analysis as A
    from .checkpoint import load_checkpoint
    ref, _ = load_checkpoint(args.ref)
    paths = _checkpoints(args.trace)
    batch = _eval_batch(args, ref) if args.measure in ("cka", "gradnorm") else None
    ref_acts = A.layer_activations(ref, batch[0]) if args.measure == "cka" else None
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "layer", "value"] + (["diff"] if args.measure == "gradnorm" else []))
    prev = None
    try:
        for path in paths:
            net, state = load_checkpoint(path)
            names = [l.name for l in net.layers]
            if args.layer and args.layer not in names:
                raise ConfigError(f"no layer {args.layer!r}; layers are {', '.join(names)}", "analysis")
            if args.measure == "structural":
                vals = {l.name: A.structural_similarity(l, ref.layer(l.name), args.top_fraction, args.symmetric)
                        for l in net.layers}
            elif args.measure == "cka":
                acts = A.layer_activations(net, batch[0])
                vals = {k: A.linear_cka(acts[k], ref_acts[k]) for k in acts}
            else:
                for l in net.layers:
                    l.frozen = l.paused = False
                vals = A.gradient_norms(net, *batch)
            for name, v in vals.items():
                if args.layer and name != args.layer:
                    continue
                row = [state.epoch, name, f"{v:.10g}"]
                if args.measure == "gradnorm":
                    row.append("" if prev is None or name not in prev else f"{abs(v - prev[name]):.10g}")
                w.writerow(row)
            prev = vals
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_report(args):
    from .train import run_report
    summary, table = run_report(args.metrics)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(table)
    sv = summary["savings"]
    dense = summary["dense_flops"] or 1.0
    print(f"epochs {summary['epochs']}")
    print(f"final eval accuracy {summary['final_eval_acc']:.4f}")
    print(f"training FLOPs {summary['cum_flops']:.6e} (dense equivalent {summary['dense_flops']:.6e})")
    for k in ("sparsity", "freezing", "sieving", "total"):
        print(f"  saved by {k:<9} {sv[k]:.6e}  ({sv[k] / dense:.2%} of dense)")
    print(f"memory bytes min {summary['min_mem_bytes']}  avg {summary['avg_mem_bytes']:.1f}  "
          f"max {summary['max_mem_bytes']}")
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="sparsefreeze",
                                description="Sparse training with progressive freezing and data sieving.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp, required=True):
        sp.add_argument("--config", required=required, help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")

    t = sub.add_parser("train", help="run training")
    add_config(t)
    t.add_argument("--out", help="output directory (default: [output] dir)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("budget", help="plan freezing for a FLOPs target without training")
    add_config(b)
    b.add_argument("--csv", help="write plan rows as CSV")
    b.add_argument("--json", help="write the full report as JSON")
    b.set_defaults(func=cmd_budget)

    a = sub.add_parser("analyze", help="similarity and gradient traces over checkpoints")
    a.add_argument("measure", choices=("structural", "cka", "gradnorm"))
    a.add_argument("--ref", required=True, help="reference checkpoint")
    a.add_argument("--trace", required=True, help="checkpoint directory (or a single file)")
    a.add_argument("--layer", help="restrict output to one layer")
    a.add_argument("--top-fraction", type=float, default=0.5)
    a.add_argument("--symmetric", action="store_true", help="also reduce the reference to its top weights")
    a.add_argument("--seed", type=int, default=0, help="seed of the evaluation sample")
    a.add_argument("--out", help="CSV path (default: stdout)")
    add_config(a, required=False)
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="summarize a metrics log")
    r.add_argument("--metrics", required=True)
    r.add_argument("--csv", help="write the per-epoch table")
    r.add_argument("--json", action="store_true", help="also print the summary as JSON")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SparseFreezeError as exc:
        print(f"error [{exc.module or 'sparsefreeze'}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # unexpected failures are reported as internal errors
        print(f"error [internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return InternalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
